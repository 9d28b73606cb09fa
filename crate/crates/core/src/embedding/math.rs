//! Prediction and loss.

use crate::error::{Error, Result};

/// Predictions are clamped into `[CLAMP_EPS, 1 - CLAMP_EPS]` before taking logs.
pub const CLAMP_EPS: f64 = 1e-7;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

/// σ'(x) = σ(x)(1 − σ(x)), at most 1/4.
#[inline]
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// σ(pᵀq).
pub fn predict(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("dimension {}", p.len()), q.len()));
    }
    Ok(sigmoid(dot(p, q)))
}

#[inline]
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// Summed binary cross-entropy over (prediction, label) pairs.
pub fn bce_loss(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(pred, label)| {
            let p = clamp_probability(pred);
            -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
        })
        .sum()
}
