// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f32` kernels used by the forward pass.
//!
//! Every kernel runs in a fixed loop order, so results are bit-stable across
//! runs and across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f32 = 1e-5;

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps `data` as a `rows x cols` matrix.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise in-place sum. Shapes must match.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} against {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += *b;
            }
        }
        Ok(())
    }
}

/// Matrix product `a * b`.
///
/// Each output element accumulates `a[i][k] * b[k][j]` for increasing `k`,
/// starting from zero.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x * m`.
pub fn vecmat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    if x.len() != m.rows {
        return Err(Error::Shape(format!(
            "vector of length {} by {}x{} matrix",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0f32; m.cols];
    for (k, &xv) in x.iter().enumerate() {
        for (o, &mv) in out.iter_mut().zip(m.row(k)) {
            *o += xv * mv;
        }
    }
    Ok(out)
}

/// Numerically stable softmax.
pub fn softmax(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Argument(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gain, Some(bias), eps, &mut out);
    Ok(out)
}

/// Writes the normalized `x` into `out`. `bias = None` skips the additive term.
pub(crate) fn layer_norm_into(
    x: &[f32],
    gain: &[f32],
    bias: Option<&[f32]>,
    eps: f32,
    out: &mut [f32],
) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (j, o) in out.iter_mut().enumerate() {
        *o = gain[j] * (x[j] - mean) * inv;
        if let Some(b) = bias {
            *o += b[j];
        }
    }
}

/// Row-wise layer norm over a matrix.
pub fn layer_norm_rows(x: &Matrix, gain: &[f32], bias: &[f32], eps: f32) -> Result<Matrix> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::Shape(format!(
            "layer_norm over {} columns with gain={} bias={}",
            x.cols,
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let (src, dst) = (x.row(r), &mut out.data[r * x.cols..(r + 1) * x.cols]);
        layer_norm_into(src, gain, Some(bias), eps, dst);
    }
    Ok(out)
}

/// Tanh-approximation GELU for one value.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Elementwise tanh-approximation GELU.
pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let zero = m(&[&[0.0], &[0.0]]);
        assert_eq!(matmul(&a, &zero).unwrap(), zero);
        let v = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &v).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("2x3 by 2x3"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f32.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6 && (p[1] - 1.0 / 3.0).abs() < 1e-6);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((f64::from(p[0]) - 1.0).abs() < 1e-12 && f64::from(p[1]).abs() < 1e-12);
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-4 && (y[1] + 1.0).abs() < 1e-4);
        let y = layer_norm(&[5.0, 5.0], &[1.0, 1.0], &[0.3, 0.3], 1e-5).unwrap();
        assert_eq!(y, vec![0.3, 0.3]);
        let y = layer_norm(&[1.0, -1.0], &[2.0, 2.0], &[1.0, 1.0], 1e-5).unwrap();
        assert!((y[0] - 3.0).abs() < 1e-4 && (y[1] + 1.0).abs() < 1e-4);
        assert!(matches!(
            layer_norm(&[1.0], &[1.0, 1.0], &[0.0], 1e-5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }
}
