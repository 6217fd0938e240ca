//! Forward kernels shared by the tape and the plain (non-recording) API.

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Sigmoid output is clamped to `[SIGMOID_FLOOR, SIGMOID_CEIL]` so it stays
/// strictly inside (0, 1) and its square never underflows to zero.
pub const SIGMOID_FLOOR: f64 = f64::EPSILON;
pub const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Max-subtracted softmax of one vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// `log(softmax(x))` computed through log-sum-exp.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `W x + b` for a single vector, `W` is `m x n`.
pub fn dense(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::shape("dense", w.shape(), (x.len(), 1)));
    }
    if b.len() != w.rows() {
        return Err(Error::shape("dense bias", w.shape(), (b.len(), 1)));
    }
    let xm = Matrix::row_vector(x.to_vec());
    let mut out = Matrix::zeros(1, w.rows());
    dense_batch_into(&xm, w, Some(b), &mut out);
    Ok(out.into_vec())
}

/// Batched `X W^T + b`: `X` is `B x n`, `W` is `m x n`, result `B x m`.
pub(crate) fn dense_batch(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(Error::shape("dense", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(Error::shape("dense bias", w.shape(), (1, b.len())));
        }
    }
    let mut out = Matrix::zeros(x.rows(), w.rows());
    dense_batch_into(x, w, b, &mut out);
    Ok(out)
}

fn dense_batch_into(x: &Matrix, w: &Matrix, b: Option<&[f64]>, out: &mut Matrix) {
    gemm(x, false, w, true, out, 1.0, 0.0);
    if let Some(b) = b {
        for r in 0..out.rows() {
            for (o, bi) in out.row_mut(r).iter_mut().zip(b) {
                *o += bi;
            }
        }
    }
}

/// Row-wise `softmax(Q K^T / sqrt(d)) V` over independent groups of `tokens`
/// consecutive rows. Returns the output and the attention weights
/// (`groups * tokens * tokens`, row-major per group).
pub(crate) fn grouped_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    tokens: usize,
) -> Result<(Matrix, Vec<f64>)> {
    if q.shape() != k.shape() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if q.shape() != v.shape() {
        return Err(Error::shape("attention q/v", q.shape(), v.shape()));
    }
    if tokens == 0 || q.rows() % tokens != 0 || q.cols() == 0 {
        return Err(Error::shape("attention tokens", q.shape(), (tokens, q.cols())));
    }
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let groups = q.rows() / tokens;
    let mut probs = vec![0.0; groups * tokens * tokens];
    let mut out = Matrix::zeros(q.rows(), d);
    for g in 0..groups {
        let base = g * tokens;
        let p = &mut probs[g * tokens * tokens..(g + 1) * tokens * tokens];
        for i in 0..tokens {
            let qi = q.row(base + i);
            let row = &mut p[i * tokens..(i + 1) * tokens];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = k.row(base + j);
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
            let o = out.row_mut(base + i);
            for (j, &w) in row.iter().enumerate() {
                for (oc, vc) in o.iter_mut().zip(v.row(base + j)) {
                    *oc += w * vc;
                }
            }
        }
    }
    Ok((out, probs))
}

/// `softmax(Q K^T / sqrt(d)) V` for one sequence of `T` tokens of width `d`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.rows() == 0 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    grouped_attention(q, k, v, q.rows()).map(|(out, _)| out)
}
