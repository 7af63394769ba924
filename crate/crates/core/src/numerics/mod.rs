//! Dense linear algebra, probability primitives, seeded randomness and a
//! finite-difference gradient checker.
//!
//! Everything here computes in `f64`. Single precision only shows up in the
//! file codecs.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{grad_check, numeric_gradient, relative_error, GradReport, GroupReport, ParamGroup};
pub use matrix::{argmax, dot, norm, Matrix};
pub use rng::{seed_child, Rng};

use crate::error::{Error, Result};

/// Default guard for [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Result of [`l2_normalize_rows`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub matrix: Matrix,
    /// Rows whose norm was `<= eps` and were passed through unchanged.
    pub zero_rows: usize,
}

/// Scales every row to unit Euclidean norm. Rows with norm `<= eps` are
/// returned unchanged and counted in [`Normalized::zero_rows`].
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Normalized {
    let mut out = m.clone();
    let mut zero_rows = 0;
    for r in 0..out.rows() {
        if !normalize_in_place(out.row_mut(r), eps) {
            zero_rows += 1;
        }
    }
    Normalized { matrix: out, zero_rows }
}

/// Normalizes `v` in place; returns `false` (leaving `v` untouched) when its
/// norm is `<= eps`.
pub fn normalize_in_place(v: &mut [f64], eps: f64) -> bool {
    let n = norm(v);
    if n <= eps {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Vector-Jacobian product of `x -> x / |x|`: maps an upstream gradient on
/// the normalized vector back onto `x`. Below `eps` the map is the identity.
pub fn normalize_backward(x: &[f64], upstream: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(x);
    if n <= eps {
        return upstream.to_vec();
    }
    let proj = dot(x, upstream) / (n * n);
    x.iter().zip(upstream).map(|(&xi, &gi)| (gi - xi * proj) / n).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Multiclass softmax cross-entropy. Returns the loss and its gradient with
/// respect to the logits, `softmax(logits) - one_hot(target)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "logits",
            index: target,
            bound: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let loss = log_z - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// One row per label, `1.0` in the label's column.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Index {
                what: "classes",
                index: label,
                bound: num_classes,
            });
        }
        m.set(i, label, 1.0);
    }
    Ok(m)
}
