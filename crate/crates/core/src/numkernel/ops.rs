//! Elementwise and row-wise operations with their hand-derived backward passes.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Norms below this are treated as a collapsed embedding.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Max-subtracted softmax. Total on finite input.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let s = softmax(x.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Backward of a row softmax given its output `y`: `dx = y ⊙ (g − ⟨y, g⟩)`.
pub fn softmax_rows_backward(y: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), grad_out.row(r));
        let inner = dot(yr, gr);
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - inner);
        }
    }
    dx
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn norm(z: &[f64]) -> f64 {
    dot(z, z).sqrt()
}

pub fn l2_normalize(z: &[f64]) -> Result<Vec<f64>> {
    let n = norm(z);
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateVector {
            op: "l2_normalize",
            norm: n,
        });
    }
    Ok(z.iter().map(|v| v / n).collect())
}

/// Row-normalized copy of `x` plus the original row norms (needed by the backward pass).
pub fn normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateVector {
                op: "normalize_rows",
                norm: n,
            });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of `y = x / ‖x‖` per row: `dx = (g − y⟨y, g⟩) / ‖x‖`.
pub fn normalize_rows_backward(y: &Matrix, norms: &[f64], grad_out: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), grad_out.row(r));
        let inner = dot(yr, gr);
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = (gv - yv * inner) / norms[r];
        }
    }
    dx
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateVector {
                op: "cosine_similarity",
                norm: n,
            });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
