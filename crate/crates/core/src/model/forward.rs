// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::interventions::{HeadOverride, InterventionSpec};
use crate::numerics::{
    gelu_scalar, layer_norm_into, layer_norm_rows, matmul, softmax, softmax_in_place, vecmat,
    Matrix,
};

use super::ModelBundle;

/// Everything computed during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// `residuals[l]` is `[n x d_model]`; index 0 holds the embeddings and
    /// index `l` the stream after `l` blocks.
    pub residuals: Vec<Matrix>,
    /// `attention[layer][head]` is `[n x n]`, post-softmax, causal.
    pub attention: Vec<Vec<Matrix>>,
    /// `head_outputs[layer][head]` is `[n x d_head]`, taken before the output
    /// projection and after any head ablation.
    pub head_outputs: Vec<Vec<Matrix>>,
    /// `[n x vocab_size]`
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.residuals.len() - 1
    }
}

/// Runs the model over `tokens`, applying `intervention`, and records every
/// intermediate quantity.
pub fn forward(
    bundle: &ModelBundle,
    tokens: &[usize],
    intervention: &InterventionSpec,
) -> Result<ForwardTrace> {
    let cfg = &bundle.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Argument("forward needs at least one token".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::Capacity(format!(
            "sequence of {n} tokens exceeds max_seq = {}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} out of range for vocab of {}",
            cfg.vocab_size
        )));
    }
    intervention.validate(cfg)?;

    let (d, dh) = (cfg.d_model, cfg.d_head);
    let mut resid = Matrix::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = resid.row_mut(i);
        for ((r, e), p) in row
            .iter_mut()
            .zip(bundle.token_embedding.row(t))
            .zip(bundle.positional_embedding.row(i))
        {
            *r = e + p;
        }
    }

    let mut residuals = Vec::with_capacity(cfg.n_layers + 1);
    residuals.push(resid.clone());
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut head_outputs = Vec::with_capacity(cfg.n_layers);
    let scale = 1.0 / (dh as f32).sqrt();

    for (layer, block) in bundle.blocks.iter().enumerate() {
        let normed = layer_norm_rows(&resid, &block.ln1.gain, &block.ln1.bias, cfg.ln_eps)?;
        let mut concat = Matrix::zeros(n, d);
        let mut layer_attn = Vec::with_capacity(cfg.n_heads);
        let mut layer_out = Vec::with_capacity(cfg.n_heads);
        for (h, hw) in block.heads.iter().enumerate() {
            let mut q = matmul(&normed, &hw.w_q)?;
            q.add_row_bias(&hw.b_q)?;
            let mut k = matmul(&normed, &hw.w_k)?;
            k.add_row_bias(&hw.b_k)?;
            let mut v = matmul(&normed, &hw.w_v)?;
            v.add_row_bias(&hw.b_v)?;

            let mut pattern = Matrix::zeros(n, n);
            let mut z = Matrix::zeros(n, dh);
            for i in 0..n {
                let qi = q.row(i);
                let prow = &mut pattern.row_mut(i)[..=i];
                for (j, s) in prow.iter_mut().enumerate() {
                    *s = dot(qi, k.row(j)) * scale;
                }
                softmax_in_place(prow);
                let zi = z.row_mut(i);
                for (j, &a) in pattern.row(i)[..=i].iter().enumerate() {
                    for (o, &vv) in zi.iter_mut().zip(v.row(j)) {
                        *o += a * vv;
                    }
                }
            }
            match intervention.head_override(layer, h) {
                HeadOverride::Keep => {}
                HeadOverride::Zero => z = Matrix::zeros(n, dh),
                HeadOverride::Replace(mean) => {
                    for i in 0..n {
                        z.row_mut(i).copy_from_slice(mean);
                    }
                }
            }
            for i in 0..n {
                concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(z.row(i));
            }
            layer_attn.push(pattern);
            layer_out.push(z);
        }
        if intervention.attn_active(layer) {
            let mut attn_out = matmul(&concat, &block.w_o)?;
            attn_out.add_row_bias(&block.b_o)?;
            resid.add_assign(&attn_out)?;
        }
        if intervention.mlp_active(layer) {
            let normed = layer_norm_rows(&resid, &block.ln2.gain, &block.ln2.bias, cfg.ln_eps)?;
            let mut hidden = matmul(&normed, &block.w_in)?;
            hidden.add_row_bias(&block.b_in)?;
            for x in hidden.data_mut() {
                *x = gelu_scalar(*x);
            }
            let mut mlp_out = matmul(&hidden, &block.w_out)?;
            mlp_out.add_row_bias(&block.b_out)?;
            resid.add_assign(&mlp_out)?;
        }
        residuals.push(resid.clone());
        attention.push(layer_attn);
        head_outputs.push(layer_out);
    }

    let mut logits = Matrix::zeros(n, cfg.vocab_size);
    for i in 0..n {
        let row = unembed(bundle, resid.row(i))?;
        logits.row_mut(i).copy_from_slice(&row);
    }
    debug_assert!(logits.is_finite());

    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        residuals,
        attention,
        head_outputs,
        logits,
    })
}

/// Final layer norm followed by the unembedding (and its bias, if any).
pub(crate) fn unembed(bundle: &ModelBundle, hidden: &[f32]) -> Result<Vec<f32>> {
    let mut normed = vec![0.0; hidden.len()];
    layer_norm_into(
        hidden,
        &bundle.final_ln.gain,
        Some(&bundle.final_ln.bias),
        bundle.config.ln_eps,
        &mut normed,
    );
    let mut logits = vecmat(&normed, &bundle.unembedding)?;
    if let Some(b) = &bundle.unembedding_bias {
        for (l, bv) in logits.iter_mut().zip(b) {
            *l += bv;
        }
    }
    Ok(logits)
}

/// Softmax over the final position's logits.
pub fn next_token_distribution(trace: &ForwardTrace) -> Result<Vec<f32>> {
    if trace.is_empty() {
        return Err(Error::Argument("empty trace".into()));
    }
    softmax(trace.logits.row(trace.len() - 1))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_model, zero_block_model, RandomModelSpec};

    fn spec() -> RandomModelSpec {
        RandomModelSpec {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 12,
            max_seq: 10,
            seed: 11,
        }
    }

    #[test]
    fn zero_blocks_pass_embeddings_through() {
        let b = zero_block_model(&spec()).unwrap();
        let tokens = vec![3, 1, 4, 1, 5];
        let t = forward(&b, &tokens, &InterventionSpec::none()).unwrap();
        for i in 0..tokens.len() {
            let expect = unembed(&b, t.residuals[0].row(i)).unwrap();
            assert_eq!(t.logits.row(i), expect.as_slice());
        }
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let b = random_model(&spec()).unwrap();
        let a = forward(&b, &[1, 2, 3, 4], &InterventionSpec::none()).unwrap();
        let c = forward(&b, &[1, 2, 3, 9], &InterventionSpec::none()).unwrap();
        for i in 0..3 {
            assert_eq!(a.logits.row(i), c.logits.row(i));
        }
        assert_ne!(a.logits.row(3), c.logits.row(3));
    }

    #[test]
    fn input_errors() {
        let b = random_model(&spec()).unwrap();
        let none = InterventionSpec::none();
        assert!(matches!(
            forward(&b, &[0; 11], &none),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            forward(&b, &[12], &none),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(forward(&b, &[], &none), Err(Error::Argument(_))));
        let bad = InterventionSpec::zero_heads([(5, 0)]);
        assert!(matches!(
            forward(&b, &[1], &bad),
            Err(Error::Intervention(_))
        ));
    }

    #[test]
    fn next_token_distribution_examples() {
        let b = random_model(&spec()).unwrap();
        let mut t = forward(&b, &[1, 2], &InterventionSpec::none()).unwrap();
        t.logits.row_mut(1).fill(0.0);
        let p = next_token_distribution(&t).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-7));
        t.logits.row_mut(1)[3] = 1000.0;
        let p = next_token_distribution(&t).unwrap();
        assert!((f64::from(p[3]) - 1.0).abs() < 1e-12);
        assert!(p
            .iter()
            .enumerate()
            .all(|(i, &x)| i == 3 || f64::from(x) < 1e-12));
    }

    #[test]
    fn empty_intervention_is_bit_identical() {
        let b = random_model(&spec()).unwrap();
        let a = forward(&b, &[5, 6, 7], &InterventionSpec::none()).unwrap();
        let c = forward(&b, &[5, 6, 7], &InterventionSpec::default()).unwrap();
        assert_eq!(a, c);
    }
}
