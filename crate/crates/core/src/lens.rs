// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoding intermediate residual states and single-head outputs.

use crate::error::{Error, Result};
use crate::interventions::InterventionSpec;
use crate::metrics::{calibrated_accuracy, permuted_score, EvalBatch};
use crate::model::forward::unembed;
use crate::model::{forward, ForwardTrace, ModelBundle};
use crate::numerics::{layer_norm_into, softmax, vecmat};
use crate::parallel::try_par_map;
use crate::prompting::PromptInstance;

/// Decoded residual state at one layer and position.
#[derive(Debug, Clone, PartialEq)]
pub struct LensReading {
    pub layer: usize,
    pub position: usize,
    pub logits: Vec<f32>,
    pub distribution: Vec<f32>,
}

/// Applies the final layer norm and unembedding to `residuals[layer]`.
pub fn logit_lens(
    trace: &ForwardTrace,
    bundle: &ModelBundle,
    layer: usize,
    position: usize,
) -> Result<LensReading> {
    let resid = trace
        .residuals
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} outside 0..={}", trace.n_layers())))?;
    if position >= resid.rows() {
        return Err(Error::Index(format!(
            "position {position} outside sequence of {}",
            resid.rows()
        )));
    }
    let logits = unembed(bundle, resid.row(position))?;
    let distribution = softmax(&logits)?;
    Ok(LensReading {
        layer,
        position,
        logits,
        distribution,
    })
}

/// Logit contribution of one head's output at `position`: the head's slice
/// of the output projection, the final norm's scaling (no bias) and the
/// unembedding (no bias).
pub fn head_lens(
    trace: &ForwardTrace,
    bundle: &ModelBundle,
    layer: usize,
    head: usize,
    position: usize,
) -> Result<Vec<f32>> {
    let z = trace
        .head_outputs
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or_else(|| Error::Index(format!("no head ({layer}, {head}) in trace")))?;
    if position >= z.rows() {
        return Err(Error::Index(format!(
            "position {position} outside sequence of {}",
            z.rows()
        )));
    }
    let cfg = &bundle.config;
    let w_o = &bundle.blocks[layer].w_o;
    let dh = cfg.d_head;
    let mut write = vec![0.0f32; cfg.d_model];
    for (k, &zk) in z.row(position).iter().enumerate() {
        for (w, &o) in write.iter_mut().zip(w_o.row(head * dh + k)) {
            *w += zk * o;
        }
    }
    let mut normed = vec![0.0; cfg.d_model];
    layer_norm_into(&write, &bundle.final_ln.gain, None, cfg.ln_eps, &mut normed);
    vecmat(&normed, &bundle.unembedding)
}

/// Per-layer class probabilities at the answer position of one prompt.
/// Entry `[layer][class]` is the lens probability of that class's first
/// label token.
pub fn layer_label_probs(
    bundle: &ModelBundle,
    prompt: &PromptInstance,
    intervention: &InterventionSpec,
) -> Result<Vec<Vec<f64>>> {
    let trace = forward(bundle, &prompt.rendered, intervention)?;
    (0..=trace.n_layers())
        .map(|layer| {
            let r = logit_lens(&trace, bundle, layer, prompt.query_answer_position)?;
            Ok(prompt
                .label_token_ids
                .iter()
                .map(|&t| f64::from(r.distribution[t]))
                .collect())
        })
        .collect()
}

/// One evaluation batch per layer.
pub fn layer_batches(
    bundle: &ModelBundle,
    prompts: &[PromptInstance],
    intervention: &InterventionSpec,
) -> Result<Vec<EvalBatch>> {
    let per_prompt = try_par_map(prompts, |p| layer_label_probs(bundle, p, intervention))?;
    let n_layers = bundle.config.n_layers;
    let mut batches: Vec<EvalBatch> = (0..=n_layers)
        .map(|layer| EvalBatch {
            layer,
            ..EvalBatch::default()
        })
        .collect();
    for (prompt, layers) in prompts.iter().zip(per_prompt) {
        for (batch, probs) in batches.iter_mut().zip(layers) {
            batch.push(probs, prompt.query.true_class, prompt.permuted_class());
        }
    }
    Ok(batches)
}

/// Which statistic a layerwise curve reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveMetric {
    #[default]
    CalibratedAccuracy,
    PermutedScore,
}

/// The chosen metric at every layer `0..=n_layers`.
pub fn layerwise_curve(
    bundle: &ModelBundle,
    prompts: &[PromptInstance],
    intervention: &InterventionSpec,
    metric: CurveMetric,
) -> Result<Vec<f64>> {
    layer_batches(bundle, prompts, intervention)?
        .iter()
        .map(|b| match metric {
            CurveMetric::CalibratedAccuracy => calibrated_accuracy(b),
            CurveMetric::PermutedScore => permuted_score(b),
        })
        .collect()
}
