// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::HeadScoreRecord;

/// Output directory that remembers what it wrote so a failed run can undo it.
pub(crate) struct OutputDir {
    dir: PathBuf,
    created: bool,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub(crate) fn create(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created,
            written: Vec::new(),
        })
    }

    pub(crate) fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e).in_stage("write outputs"))?;
        self.written.push(path);
        Ok(())
    }

    /// `{index_name},p` rows for indices `0..values.len()`.
    pub(crate) fn write_curve(
        &mut self,
        name: &str,
        index_name: &str,
        values: &[f64],
    ) -> Result<()> {
        let rows: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
        self.write_pairs(name, index_name, &rows)
    }

    pub(crate) fn write_pairs(
        &mut self,
        name: &str,
        index_name: &str,
        rows: &[(usize, f64)],
    ) -> Result<()> {
        let mut text = format!("{index_name},p\n");
        for (i, p) in rows {
            let _ = writeln!(text, "{i},{}", fmt_value(*p));
        }
        self.write(name, &text)
    }

    pub(crate) fn write_heads(&mut self, records: &[HeadScoreRecord]) -> Result<()> {
        let mut text = String::from("layer,head,pm,flp\n");
        for r in records {
            let _ = writeln!(
                text,
                "{},{},{},{}",
                r.layer,
                r.head,
                fmt_value(r.pm_score),
                fmt_value(r.flp_score)
            );
        }
        self.write("heads.csv", &text)
    }

    pub(crate) fn cleanup(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn fmt_value(v: f64) -> String {
    // avoid "-0.000000"
    let s = format!("{v:.6}");
    if s.trim_start_matches('-')
        .chars()
        .all(|c| c == '0' || c == '.')
    {
        "0.000000".to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_cleanup() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("new");
        let mut out = OutputDir::create(&dir).unwrap();
        out.write_curve("a.csv", "layer", &[0.5, -0.0, 1.0])
            .unwrap();
        let text = fs::read_to_string(dir.join("a.csv")).unwrap();
        assert_eq!(text, "layer,p\n0,0.500000\n1,0.000000\n2,1.000000\n");
        out.cleanup();
        assert!(!dir.exists());
    }
}
