// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture definition, weights, tokenizer and the instrumented forward
//! pass.
//!
//! The architecture is a sequential pre-LN decoder: every block adds the
//! output of a causal multi-head attention sublayer and then the output of a
//! GELU MLP to the residual stream. Positions use a learned absolute table.

pub(crate) mod forward;
mod manifest;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use forward::{forward, next_token_distribution, ForwardTrace};
pub use manifest::{load_model, save_model, MANIFEST_FILE, WEIGHTS_FILE};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Load(format!("config.{name} must be >= 1")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Load(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 || !self.ln_eps.is_finite() {
            return Err(Error::Load(format!(
                "ln_eps must be > 0, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }
}

/// Layer-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// Weights of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `[d_model x d_head]`
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `[d_head]`
    pub b_q: Vec<f32>,
    pub b_k: Vec<f32>,
    pub b_v: Vec<f32>,
}

impl HeadWeights {
    pub fn zeros(d_model: usize, d_head: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_model, d_head),
            w_k: Matrix::zeros(d_model, d_head),
            w_v: Matrix::zeros(d_model, d_head),
            b_q: vec![0.0; d_head],
            b_k: vec![0.0; d_head],
            b_v: vec![0.0; d_head],
        }
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub heads: Vec<HeadWeights>,
    /// `[d_model x d_model]`, consumes the concatenated head outputs.
    pub w_o: Matrix,
    pub b_o: Vec<f32>,
    pub ln2: LayerNormParams,
    /// `[d_model x d_mlp]`
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// `[d_mlp x d_model]`
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

impl BlockWeights {
    /// A block whose every tensor is zero (layer norms keep unit gain).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            ln1: LayerNormParams::identity(cfg.d_model),
            heads: (0..cfg.n_heads)
                .map(|_| HeadWeights::zeros(cfg.d_model, cfg.d_head))
                .collect(),
            w_o: Matrix::zeros(cfg.d_model, cfg.d_model),
            b_o: vec![0.0; cfg.d_model],
            ln2: LayerNormParams::identity(cfg.d_model),
            w_in: Matrix::zeros(cfg.d_model, cfg.d_mlp),
            b_in: vec![0.0; cfg.d_mlp],
            w_out: Matrix::zeros(cfg.d_mlp, cfg.d_model),
            b_out: vec![0.0; cfg.d_model],
        }
    }
}

/// Configuration, weights and vocabulary of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    /// `[vocab_size x d_model]`
    pub token_embedding: Matrix,
    /// `[max_seq x d_model]`
    pub positional_embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: LayerNormParams,
    /// `[d_model x vocab_size]`
    pub unembedding: Matrix,
    pub unembedding_bias: Option<Vec<f32>>,
    pub vocab: Vec<String>,
    token_index: HashMap<String, usize>,
}

impl ModelBundle {
    /// Assembles a bundle and checks every shape against `config`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: ModelConfig,
        token_embedding: Matrix,
        positional_embedding: Matrix,
        blocks: Vec<BlockWeights>,
        final_ln: LayerNormParams,
        unembedding: Matrix,
        unembedding_bias: Option<Vec<f32>>,
        vocab: Vec<String>,
    ) -> Result<Self> {
        let mut token_index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if token_index.insert(tok.clone(), i).is_some() {
                return Err(Error::Load(format!("duplicate vocab entry {tok:?}")));
            }
        }
        let bundle = Self {
            config,
            token_embedding,
            positional_embedding,
            blocks,
            final_ln,
            unembedding,
            unembedding_bias,
            vocab,
            token_index,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.vocab.len() != c.vocab_size {
            return Err(Error::Load(format!(
                "vocab has {} entries, config.vocab_size is {}",
                self.vocab.len(),
                c.vocab_size
            )));
        }
        check_mat("embed.W_E", &self.token_embedding, c.vocab_size, c.d_model)?;
        check_mat(
            "pos.W_pos",
            &self.positional_embedding,
            c.max_seq,
            c.d_model,
        )?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::Load(format!(
                "{} blocks for n_layers = {}",
                self.blocks.len(),
                c.n_layers
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            check_vec(&format!("blocks.{i}.ln1.g"), &b.ln1.gain, c.d_model)?;
            check_vec(&format!("blocks.{i}.ln1.b"), &b.ln1.bias, c.d_model)?;
            if b.heads.len() != c.n_heads {
                return Err(Error::Load(format!(
                    "blocks.{i} has {} heads, expected {}",
                    b.heads.len(),
                    c.n_heads
                )));
            }
            for (h, hw) in b.heads.iter().enumerate() {
                for (nm, m) in [("W_Q", &hw.w_q), ("W_K", &hw.w_k), ("W_V", &hw.w_v)] {
                    check_mat(&format!("blocks.{i}.attn.{nm}.{h}"), m, c.d_model, c.d_head)?;
                }
                for (nm, v) in [("b_Q", &hw.b_q), ("b_K", &hw.b_k), ("b_V", &hw.b_v)] {
                    check_vec(&format!("blocks.{i}.attn.{nm}.{h}"), v, c.d_head)?;
                }
            }
            check_mat(
                &format!("blocks.{i}.attn.W_O"),
                &b.w_o,
                c.d_model,
                c.d_model,
            )?;
            check_vec(&format!("blocks.{i}.attn.b_O"), &b.b_o, c.d_model)?;
            check_vec(&format!("blocks.{i}.ln2.g"), &b.ln2.gain, c.d_model)?;
            check_vec(&format!("blocks.{i}.ln2.b"), &b.ln2.bias, c.d_model)?;
            check_mat(&format!("blocks.{i}.mlp.W_in"), &b.w_in, c.d_model, c.d_mlp)?;
            check_vec(&format!("blocks.{i}.mlp.b_in"), &b.b_in, c.d_mlp)?;
            check_mat(
                &format!("blocks.{i}.mlp.W_out"),
                &b.w_out,
                c.d_mlp,
                c.d_model,
            )?;
            check_vec(&format!("blocks.{i}.mlp.b_out"), &b.b_out, c.d_model)?;
        }
        check_vec("ln_f.g", &self.final_ln.gain, c.d_model)?;
        check_vec("ln_f.b", &self.final_ln.bias, c.d_model)?;
        check_mat("unembed.W_U", &self.unembedding, c.d_model, c.vocab_size)?;
        if let Some(b) = &self.unembedding_bias {
            check_vec("unembed.b_U", b, c.vocab_size)?;
        }
        Ok(())
    }

    /// Looks up token ids for a sequence of token strings.
    /// Same weights under a different vocabulary of equal size.
    pub fn with_vocab(self, vocab: Vec<String>) -> Result<Self> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Vocabulary(format!(
                "vocab of {} entries for vocab_size {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        Self::new(
            self.config,
            self.token_embedding,
            self.positional_embedding,
            self.blocks,
            self.final_ln,
            self.unembedding,
            self.unembedding_bias,
            vocab,
        )
    }

    pub fn tokenize<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.token_id(t.as_ref())).collect()
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.token_index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown token {token:?}")))
    }

    /// Maps ids back to their token strings.
    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.vocab
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
            })
            .collect()
    }
}

fn check_mat(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Load(format!(
            "tensor {name}: expected shape [{rows}, {cols}], got [{}, {}]",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Load(format!("tensor {name} has non-finite entries")));
    }
    Ok(())
}

fn check_vec(name: &str, v: &[f32], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Load(format!(
            "tensor {name}: expected shape [{len}], got [{}]",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Load(format!("tensor {name} has non-finite entries")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle(vocab: &[&str]) -> Result<ModelBundle> {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_head: 2,
            d_mlp: 2,
            vocab_size: vocab.len(),
            max_seq: 4,
            ln_eps: 1e-5,
        };
        ModelBundle::new(
            cfg.clone(),
            Matrix::zeros(vocab.len(), 2),
            Matrix::zeros(4, 2),
            vec![BlockWeights::zeros(&cfg)],
            LayerNormParams::identity(2),
            Matrix::zeros(2, vocab.len()),
            None,
            vocab.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn tokenize_examples() {
        let vocab = ["a", "b", ":", "c", "d", "e", "f", "hockey", "g", "sport"];
        let b = tiny_bundle(&vocab).unwrap();
        assert!(b.tokenize::<&str>(&[]).unwrap().is_empty());
        let ids = b.tokenize(&["hockey", ":", "sport"]).unwrap();
        assert_eq!(ids, vec![7, 2, 9]);
        assert_eq!(b.detokenize(&ids).unwrap(), vec!["hockey", ":", "sport"]);
        let err = b.tokenize(&["unknownword"]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(ref m) if m.contains("unknownword")));
    }

    #[test]
    fn duplicate_vocab_rejected() {
        assert!(matches!(tiny_bundle(&["x", "x"]), Err(Error::Load(_))));
    }

    #[test]
    fn config_requires_head_product() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 3,
            d_model: 8,
            d_head: 2,
            d_mlp: 4,
            vocab_size: 4,
            max_seq: 4,
            ln_eps: 1e-5,
        };
        assert!(cfg.validate().is_err());
    }
}
