// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight-manifest reading and writing.
//!
//! A model directory holds `manifest.json` plus raw little-endian `f32` blobs.
//! Each tensor entry names a blob file and a byte offset into it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockWeights, HeadWeights, LayerNormParams, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    offset: u64,
}

struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Reads and validates a model directory (or a path to its `manifest.json`).
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (dir, path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    manifest.config.validate()?;

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for entry in manifest.tensors {
        if entry.file.contains("..") || Path::new(&entry.file).is_absolute() {
            return Err(Error::Load(format!(
                "tensor {}: blob path {:?} escapes the model directory",
                entry.name, entry.file
            )));
        }
        if !blobs.contains_key(&entry.file) {
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            blobs.insert(entry.file.clone(), bytes);
        }
        let blob = &blobs[&entry.file];
        let count: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::Load(format!("tensor {}: offset overflow", entry.name)))?;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::Load(format!(
                "tensor {}: bytes {start}..{end} exceed blob {} of {} bytes",
                entry.name,
                entry.file,
                blob.len()
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors
            .insert(
                entry.name.clone(),
                Tensor {
                    shape: entry.shape,
                    data,
                },
            )
            .is_some()
        {
            return Err(Error::Load(format!("tensor {} listed twice", entry.name)));
        }
    }

    let mut store = Store { tensors };
    let cfg = manifest.config;
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let token_embedding = store.matrix("embed.W_E", cfg.vocab_size, d)?;
    let positional_embedding = store.matrix("pos.W_pos", cfg.max_seq, d)?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("blocks.{i}");
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            heads.push(HeadWeights {
                w_q: store.matrix(&format!("{p}.attn.W_Q.{h}"), d, dh)?,
                w_k: store.matrix(&format!("{p}.attn.W_K.{h}"), d, dh)?,
                w_v: store.matrix(&format!("{p}.attn.W_V.{h}"), d, dh)?,
                b_q: store.optional_vector(&format!("{p}.attn.b_Q.{h}"), dh)?,
                b_k: store.optional_vector(&format!("{p}.attn.b_K.{h}"), dh)?,
                b_v: store.optional_vector(&format!("{p}.attn.b_V.{h}"), dh)?,
            });
        }
        blocks.push(BlockWeights {
            ln1: LayerNormParams {
                gain: store.vector(&format!("{p}.ln1.g"), d)?,
                bias: store.vector(&format!("{p}.ln1.b"), d)?,
            },
            heads,
            w_o: store.matrix(&format!("{p}.attn.W_O"), d, d)?,
            b_o: store.optional_vector(&format!("{p}.attn.b_O"), d)?,
            ln2: LayerNormParams {
                gain: store.vector(&format!("{p}.ln2.g"), d)?,
                bias: store.vector(&format!("{p}.ln2.b"), d)?,
            },
            w_in: store.matrix(&format!("{p}.mlp.W_in"), d, cfg.d_mlp)?,
            b_in: store.vector(&format!("{p}.mlp.b_in"), cfg.d_mlp)?,
            w_out: store.matrix(&format!("{p}.mlp.W_out"), cfg.d_mlp, d)?,
            b_out: store.vector(&format!("{p}.mlp.b_out"), d)?,
        });
    }
    let final_ln = LayerNormParams {
        gain: store.vector("ln_f.g", d)?,
        bias: store.vector("ln_f.b", d)?,
    };
    let unembedding = store.matrix("unembed.W_U", d, cfg.vocab_size)?;
    let unembedding_bias = if store.tensors.contains_key("unembed.b_U") {
        Some(store.vector("unembed.b_U", cfg.vocab_size)?)
    } else {
        None
    };
    if let Some(name) = store.tensors.keys().min() {
        return Err(Error::Load(format!("unexpected tensor {name}")));
    }
    ModelBundle::new(
        cfg,
        token_embedding,
        positional_embedding,
        blocks,
        final_ln,
        unembedding,
        unembedding_bias,
        manifest.vocab,
    )
}

struct Store {
    tensors: HashMap<String, Tensor>,
}

impl Store {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Load(format!("missing tensor {name} ({})", describe(name))))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self.take(name)?;
        if t.shape != [rows, cols] {
            return Err(Error::Load(format!(
                "tensor {name}: expected shape [{rows}, {cols}], got {:?}",
                t.shape
            )));
        }
        Matrix::from_vec(rows, cols, t.data)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.take(name)?;
        if t.shape != [len] {
            return Err(Error::Load(format!(
                "tensor {name}: expected shape [{len}], got {:?}",
                t.shape
            )));
        }
        Ok(t.data)
    }

    fn optional_vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        if self.tensors.contains_key(name) {
            self.vector(name, len)
        } else {
            Ok(vec![0.0; len])
        }
    }
}

/// Spells out the layer-norm suffixes so error messages read naturally.
fn describe(name: &str) -> String {
    if let Some(stem) = name.strip_suffix(".g") {
        format!("{stem}.gain")
    } else if let Some(stem) = name.strip_suffix(".b") {
        format!("{stem}.bias")
    } else {
        name.to_string()
    }
}

/// Writes `bundle` as `manifest.json` + `weights.bin` under `dir`.
///
/// Zero attention biases are omitted; they are optional on load.
pub fn save_model(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
        entries.push(TensorEntry {
            name,
            shape,
            file: WEIGHTS_FILE.to_string(),
            offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let mat = |m: &Matrix| vec![m.rows(), m.cols()];

    push(
        "embed.W_E".into(),
        mat(&bundle.token_embedding),
        bundle.token_embedding.data(),
    );
    push(
        "pos.W_pos".into(),
        mat(&bundle.positional_embedding),
        bundle.positional_embedding.data(),
    );
    for (i, b) in bundle.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        push(format!("{p}.ln1.g"), vec![b.ln1.gain.len()], &b.ln1.gain);
        push(format!("{p}.ln1.b"), vec![b.ln1.bias.len()], &b.ln1.bias);
        for (h, hw) in b.heads.iter().enumerate() {
            push(format!("{p}.attn.W_Q.{h}"), mat(&hw.w_q), hw.w_q.data());
            push(format!("{p}.attn.W_K.{h}"), mat(&hw.w_k), hw.w_k.data());
            push(format!("{p}.attn.W_V.{h}"), mat(&hw.w_v), hw.w_v.data());
            for (nm, v) in [("b_Q", &hw.b_q), ("b_K", &hw.b_k), ("b_V", &hw.b_v)] {
                if v.iter().any(|x| *x != 0.0) {
                    push(format!("{p}.attn.{nm}.{h}"), vec![v.len()], v);
                }
            }
        }
        push(format!("{p}.attn.W_O"), mat(&b.w_o), b.w_o.data());
        if b.b_o.iter().any(|x| *x != 0.0) {
            push(format!("{p}.attn.b_O"), vec![b.b_o.len()], &b.b_o);
        }
        push(format!("{p}.ln2.g"), vec![b.ln2.gain.len()], &b.ln2.gain);
        push(format!("{p}.ln2.b"), vec![b.ln2.bias.len()], &b.ln2.bias);
        push(format!("{p}.mlp.W_in"), mat(&b.w_in), b.w_in.data());
        push(format!("{p}.mlp.b_in"), vec![b.b_in.len()], &b.b_in);
        push(format!("{p}.mlp.W_out"), mat(&b.w_out), b.w_out.data());
        push(format!("{p}.mlp.b_out"), vec![b.b_out.len()], &b.b_out);
    }
    push(
        "ln_f.g".into(),
        vec![bundle.final_ln.gain.len()],
        &bundle.final_ln.gain,
    );
    push(
        "ln_f.b".into(),
        vec![bundle.final_ln.bias.len()],
        &bundle.final_ln.bias,
    );
    push(
        "unembed.W_U".into(),
        mat(&bundle.unembedding),
        bundle.unembedding.data(),
    );
    if let Some(b) = &bundle.unembedding_bias {
        push("unembed.b_U".into(), vec![b.len()], b);
    }

    let manifest = Manifest {
        config: bundle.config.clone(),
        vocab: bundle.vocab.clone(),
        tensors: entries,
    };
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, &blob).map_err(|e| Error::io(&weights_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}
