// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{LabelingScheme, SchemeKind};

/// Prefix that selects a built-in fixture instead of a path.
pub const FIXTURE_PREFIX: &str = "fixture:";

/// A scheme given either as a bare kind name or as a full object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeEntry {
    Name(String),
    Full(LabelingScheme),
}

impl SchemeEntry {
    pub fn resolve(&self) -> Result<LabelingScheme> {
        match self {
            Self::Name(name) => Ok(LabelingScheme::new(name.parse::<SchemeKind>()?)),
            Self::Full(s) => Ok(s.clone()),
        }
    }
}

/// A single demonstration count or a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    One(usize),
    Sweep(Vec<usize>),
}

impl KSpec {
    pub fn values(&self) -> Vec<usize> {
        match self {
            Self::One(k) => vec![*k],
            Self::Sweep(ks) => ks.clone(),
        }
    }

    pub fn is_sweep(&self) -> bool {
        matches!(self, Self::Sweep(_))
    }

    /// The demonstration count used for layerwise curves and head scores.
    pub fn main(&self) -> usize {
        self.values().into_iter().max().unwrap_or(0)
    }
}

/// Everything `run` needs. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest path, or `fixture:induction` / `fixture:overthinking`.
    pub model: String,
    /// JSONL path, or `fixture:unnatural`.
    pub dataset: String,
    pub schemes: Vec<SchemeEntry>,
    pub k: KSpec,
    pub n_prompts: usize,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub interventions: Option<PathBuf>,
    pub outputs: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_top_n() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &Path| {
            if p.is_relative() {
                dir.join(p)
            } else {
                p.to_path_buf()
            }
        };
        for s in [&mut self.model, &mut self.dataset] {
            if !s.starts_with(FIXTURE_PREFIX) {
                *s = fix(Path::new(s.as_str())).to_string_lossy().into_owned();
            }
        }
        self.template = self.template.as_deref().map(fix);
        self.interventions = self.interventions.as_deref().map(fix);
        self.outputs = fix(&self.outputs);
    }

    /// Checks everything that does not need the model or dataset.
    pub fn validate(&self) -> Result<Vec<LabelingScheme>> {
        if self.n_prompts < 2 {
            return Err(Error::Config(format!(
                "n_prompts must be at least 2, got {}",
                self.n_prompts
            )));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("no schemes given".into()));
        }
        if self.k.values().is_empty() {
            return Err(Error::Config("empty k sweep".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let schemes = self
            .schemes
            .iter()
            .map(SchemeEntry::resolve)
            .collect::<Result<Vec<_>>>()?;
        let mut names: Vec<String> = schemes.iter().map(LabelingScheme::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("scheme {} listed twice", w[0])));
        }
        Ok(schemes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"model":"fixture:overthinking","dataset":"fixture:unnatural",
        "schemes":["correct",{"kind":"permuted"}],"k":8,"n_prompts":20,"outputs":"out"}"#;

    #[test]
    fn parses_mixed_schemes() {
        let cfg = ExperimentConfig::from_json(BASE).unwrap();
        let s = cfg.validate().unwrap();
        assert_eq!(s[1].kind, SchemeKind::Permuted);
        assert_eq!(cfg.top_n, 1);
        assert_eq!(cfg.k.main(), 8);
    }

    #[test]
    fn unknown_scheme_fails_validation() {
        let cfg = ExperimentConfig::from_json(&BASE.replace("\"correct\"", "\"bogus\"")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_batches_rejected() {
        let cfg = ExperimentConfig::from_json(&BASE.replace("20", "1")).unwrap();
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json(&BASE.replace("\"k\"", "\"kk\"")).is_err());
    }

    #[test]
    fn relative_paths_resolve() {
        let mut cfg =
            ExperimentConfig::from_json(&BASE.replace("fixture:unnatural", "data.jsonl")).unwrap();
        cfg.resolve_relative(Path::new("/tmp/x"));
        assert_eq!(cfg.dataset, "/tmp/x/data.jsonl");
        assert_eq!(cfg.model, "fixture:overthinking");
        assert_eq!(cfg.outputs, PathBuf::from("/tmp/x/out"));
    }
}
