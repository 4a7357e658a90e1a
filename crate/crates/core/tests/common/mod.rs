// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference forward pass in f64 with plain scalar loops, written
//! independently of the engine. Used as the arithmetic oracle.

#![allow(dead_code)]

use lenslab_core::model::ModelBundle;
use lenslab_core::numerics::Matrix;

fn at(m: &Matrix, r: usize, c: usize) -> f64 {
    f64::from(m.data()[r * m.cols() + c])
}

fn ln(x: &[f64], gain: &[f32], bias: Option<&[f32]>, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / sd * f64::from(gain[i]) + bias.map_or(0.0, |b| f64::from(b[i])))
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn project(x: &[f64], w: &Matrix, b: &[f32]) -> Vec<f64> {
    let mut out: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    for (i, v) in x.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let row = &w.data()[i * w.cols()..(i + 1) * w.cols()];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += v * f64::from(wv);
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Residual states `0..=L` for every position.
pub fn reference_residuals(b: &ModelBundle, tokens: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let cfg = &b.config;
    let eps = f64::from(cfg.ln_eps);
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let n = tokens.len();
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..d)
                .map(|j| at(&b.token_embedding, t, j) + at(&b.positional_embedding, i, j))
                .collect()
        })
        .collect();
    let mut out = vec![h.clone()];
    for blk in &b.blocks {
        let x: Vec<Vec<f64>> = h
            .iter()
            .map(|r| ln(r, &blk.ln1.gain, Some(&blk.ln1.bias), eps))
            .collect();
        let mut concat = vec![vec![0.0; cfg.n_heads * dh]; n];
        for (hi, hw) in blk.heads.iter().enumerate() {
            let q: Vec<Vec<f64>> = x.iter().map(|r| project(r, &hw.w_q, &hw.b_q)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|r| project(r, &hw.w_k, &hw.b_k)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|r| project(r, &hw.w_v, &hw.b_v)).collect();
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i].iter().zip(&k[j]).map(|(a, c)| a * c).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for (j, aj) in a.iter().enumerate() {
                    for c in 0..dh {
                        concat[i][hi * dh + c] += aj * v[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let attn = project(&concat[i], &blk.w_o, &blk.b_o);
            for j in 0..d {
                h[i][j] += attn[j];
            }
            let x2 = ln(&h[i], &blk.ln2.gain, Some(&blk.ln2.bias), eps);
            let hidden: Vec<f64> = project(&x2, &blk.w_in, &blk.b_in)
                .into_iter()
                .map(gelu)
                .collect();
            let mlp = project(&hidden, &blk.w_out, &blk.b_out);
            for j in 0..d {
                h[i][j] += mlp[j];
            }
        }
        out.push(h.clone());
    }
    out
}

/// Next-token distribution decoded from one residual row.
pub fn reference_decode(b: &ModelBundle, resid: &[f64]) -> Vec<f64> {
    let x = ln(
        resid,
        &b.final_ln.gain,
        Some(&b.final_ln.bias),
        f64::from(b.config.ln_eps),
    );
    let zero = vec![0.0f32; b.config.vocab_size];
    let bias = b.unembedding_bias.as_deref().unwrap_or(&zero);
    softmax(&project(&x, &b.unembedding, bias))
}

/// Final-position next-token distribution.
pub fn reference_next_token(b: &ModelBundle, tokens: &[usize]) -> Vec<f64> {
    let res = reference_residuals(b, tokens);
    reference_decode(b, res.last().unwrap().last().unwrap())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
