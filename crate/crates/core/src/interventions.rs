// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative ablations applied inside the forward pass.
//!
//! Heads are addressed as `(layer, head)` with `layer` the zero-based block
//! index. Cutoffs use residual-stream indices instead: a cutoff `l` keeps
//! blocks `0..l` (the blocks that produce residual states `1..=l`) and zeroes
//! the rest, so `l = n_layers` is the identity and `l` matches the logit-lens
//! layer index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelBundle, ModelConfig};
use crate::parallel::try_par_map;

/// `(layer, head)` address of an attention head.
pub type HeadId = (usize, usize);

/// Mean output (before the output projection) of every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeanStats {
    /// `means[layer][head]` has length `d_head`.
    pub means: Vec<Vec<Vec<f32>>>,
}

impl HeadMeanStats {
    pub fn mean(&self, layer: usize, head: usize) -> Option<&[f32]> {
        self.means.get(layer)?.get(head).map(Vec::as_slice)
    }
}

/// Set of ablations to apply during one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    #[serde(default)]
    pub zero_heads: BTreeSet<HeadId>,
    #[serde(default)]
    pub mean_heads: BTreeSet<HeadId>,
    /// Statistics used by `mean_heads`; not part of the JSON form.
    #[serde(skip)]
    pub mean_stats: Option<HeadMeanStats>,
    #[serde(default)]
    pub zero_blocks_after: Option<usize>,
    #[serde(default)]
    pub zero_attn_after: Option<usize>,
    #[serde(default)]
    pub zero_mlp_after: Option<usize>,
}

/// What the forward pass does with one head's output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadOverride<'a> {
    Keep,
    Zero,
    Replace(&'a [f32]),
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn zero_heads(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self {
            zero_heads: heads.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn zero_blocks_after(layer: usize) -> Self {
        Self {
            zero_blocks_after: Some(layer),
            ..Self::default()
        }
    }

    pub fn with_mean_heads(
        mut self,
        heads: impl IntoIterator<Item = HeadId>,
        stats: HeadMeanStats,
    ) -> Self {
        self.mean_heads.extend(heads);
        self.mean_stats = Some(stats);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.zero_heads.is_empty()
            && self.mean_heads.is_empty()
            && self.zero_blocks_after.is_none()
            && self.zero_attn_after.is_none()
            && self.zero_mlp_after.is_none()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Checks every index against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for &(l, h) in self.zero_heads.iter().chain(&self.mean_heads) {
            if l >= config.n_layers || h >= config.n_heads {
                return Err(Error::Intervention(format!(
                    "head ({l}, {h}) outside {} layers x {} heads",
                    config.n_layers, config.n_heads
                )));
            }
        }
        if let Some(&id) = self.zero_heads.intersection(&self.mean_heads).next() {
            return Err(Error::Intervention(format!(
                "head {id:?} is both zero- and mean-ablated"
            )));
        }
        if !self.mean_heads.is_empty() {
            let stats = self.mean_stats.as_ref().ok_or_else(|| {
                Error::Intervention("mean_heads given without mean statistics".into())
            })?;
            for &(l, h) in &self.mean_heads {
                match stats.mean(l, h) {
                    Some(m) if m.len() == config.d_head => {}
                    _ => {
                        return Err(Error::Intervention(format!(
                            "no d_head-length mean for head ({l}, {h})"
                        )))
                    }
                }
            }
        }
        for (name, cut) in [
            ("zero_blocks_after", self.zero_blocks_after),
            ("zero_attn_after", self.zero_attn_after),
            ("zero_mlp_after", self.zero_mlp_after),
        ] {
            if let Some(c) = cut {
                if c > config.n_layers {
                    return Err(Error::Intervention(format!(
                        "{name} = {c} exceeds n_layers = {}",
                        config.n_layers
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn head_override(&self, layer: usize, head: usize) -> HeadOverride<'_> {
        if self.zero_heads.contains(&(layer, head)) {
            HeadOverride::Zero
        } else if self.mean_heads.contains(&(layer, head)) {
            // validate() guarantees the entry exists
            match self.mean_stats.as_ref().and_then(|s| s.mean(layer, head)) {
                Some(m) => HeadOverride::Replace(m),
                None => HeadOverride::Zero,
            }
        } else {
            HeadOverride::Keep
        }
    }

    /// Whether block `block`'s attention output reaches the residual stream.
    pub fn attn_active(&self, block: usize) -> bool {
        keeps(self.zero_blocks_after, block) && keeps(self.zero_attn_after, block)
    }

    /// Whether block `block`'s MLP output reaches the residual stream.
    pub fn mlp_active(&self, block: usize) -> bool {
        keeps(self.zero_blocks_after, block) && keeps(self.zero_mlp_after, block)
    }
}

fn keeps(cutoff: Option<usize>, block: usize) -> bool {
    cutoff.is_none_or(|c| block < c)
}

/// Averages every head's output over all positions of all `prompts`.
pub fn compute_head_mean_stats(
    bundle: &ModelBundle,
    prompts: &[Vec<usize>],
) -> Result<HeadMeanStats> {
    if prompts.is_empty() {
        return Err(Error::Argument(
            "mean statistics need at least one reference prompt".into(),
        ));
    }
    let cfg = &bundle.config;
    let none = InterventionSpec::none();
    // per-prompt f64 sums, reduced afterwards in prompt order
    let partial = try_par_map(prompts, |tokens| -> Result<(Vec<f64>, usize)> {
        let trace = forward(bundle, tokens, &none)?;
        let mut sums = vec![0.0f64; cfg.n_layers * cfg.n_heads * cfg.d_head];
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                let out = &trace.head_outputs[l][h];
                let base = (l * cfg.n_heads + h) * cfg.d_head;
                for p in 0..out.rows() {
                    for (s, v) in sums[base..base + cfg.d_head].iter_mut().zip(out.row(p)) {
                        *s += f64::from(*v);
                    }
                }
            }
        }
        Ok((sums, tokens.len()))
    })?;
    let mut total = vec![0.0f64; cfg.n_layers * cfg.n_heads * cfg.d_head];
    let mut count = 0usize;
    for (sums, n) in partial {
        for (t, s) in total.iter_mut().zip(sums) {
            *t += s;
        }
        count += n;
    }
    let means = (0..cfg.n_layers)
        .map(|l| {
            (0..cfg.n_heads)
                .map(|h| {
                    let base = (l * cfg.n_heads + h) * cfg.d_head;
                    total[base..base + cfg.d_head]
                        .iter()
                        .map(|s| (s / count as f64) as f32)
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(HeadMeanStats { means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_model, RandomModelSpec};

    fn small() -> ModelBundle {
        random_model(&RandomModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 10,
            max_seq: 8,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn json_round_trip_and_layout() {
        let text = r#"{"zero_heads":[[1,0]],"mean_heads":[],"zero_blocks_after":2,"zero_attn_after":null,"zero_mlp_after":null}"#;
        let spec = InterventionSpec::from_json(text).unwrap();
        assert!(spec.zero_heads.contains(&(1, 0)));
        assert_eq!(spec.zero_blocks_after, Some(2));
        assert_eq!(
            InterventionSpec::from_json(&spec.to_json().unwrap()).unwrap(),
            spec
        );
        assert!(InterventionSpec::from_json(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_indices() {
        let cfg = small().config;
        assert!(InterventionSpec::zero_heads([(2, 0)])
            .validate(&cfg)
            .is_err());
        assert!(InterventionSpec::zero_heads([(0, 2)])
            .validate(&cfg)
            .is_err());
        assert!(InterventionSpec::zero_blocks_after(3)
            .validate(&cfg)
            .is_err());
        assert!(InterventionSpec::zero_blocks_after(2)
            .validate(&cfg)
            .is_ok());
        let mut both = InterventionSpec::zero_heads([(0, 0)]);
        both.mean_heads.insert((0, 0));
        assert!(both.validate(&cfg).is_err());
        let mut no_stats = InterventionSpec::none();
        no_stats.mean_heads.insert((0, 1));
        assert!(no_stats.validate(&cfg).is_err());
    }

    #[test]
    fn cutoffs_are_strictly_after() {
        let s = InterventionSpec::zero_blocks_after(1);
        assert!(s.attn_active(0) && s.mlp_active(0));
        assert!(!s.attn_active(1) && !s.mlp_active(1));
        assert!(InterventionSpec::none().attn_active(7));
    }

    #[test]
    fn mean_stats_single_token_prompt_is_that_output() {
        let b = small();
        let prompt = vec![vec![4usize]];
        let stats = compute_head_mean_stats(&b, &prompt).unwrap();
        let trace = forward(&b, &prompt[0], &InterventionSpec::none()).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(stats.mean(l, h).unwrap(), trace.head_outputs[l][h].row(0));
            }
        }
        assert!(compute_head_mean_stats(&b, &[]).is_err());
    }

    #[test]
    fn mean_stats_are_deterministic() {
        let b = small();
        let prompts = vec![vec![1, 2, 3], vec![4, 5], vec![9, 0, 1, 2]];
        let a = crate::parallel::with_workers(Some(1), || {
            compute_head_mean_stats(&b, &prompts).unwrap()
        });
        let c = crate::parallel::with_workers(Some(4), || {
            compute_head_mean_stats(&b, &prompts).unwrap()
        });
        assert_eq!(a, c);
    }

    #[test]
    fn composed_zero_heads_match_joint_set() {
        let b = small();
        let tokens = vec![1, 5, 2, 7];
        let mut split = InterventionSpec::zero_heads([(0, 1)]);
        split.zero_heads.insert((1, 0));
        let joint = InterventionSpec::zero_heads([(0, 1), (1, 0)]);
        let a = forward(&b, &tokens, &split).unwrap();
        let c = forward(&b, &tokens, &joint).unwrap();
        assert_eq!(a.logits, c.logits);
    }
}
