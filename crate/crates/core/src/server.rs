//! Client sampling and weighted averaging of uploaded item matrices.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::embedding::{ItemMatrix, Matrix};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Tolerance on Σ weights = 1.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// The server's aggregate after a given round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub q: ItemMatrix,
    pub round: usize,
}

/// Which clients take part in a round and how their uploads are weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    /// Sorted ascending.
    pub clients: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Number of clients sampled per round: ⌈fraction·n⌉.
pub fn cohort_size(n: usize, fraction: f64) -> usize {
    // guard against 0.6 * 10 landing a hair above 6
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Uniformly sample ⌈fraction·n⌉ clients without replacement, keyed by
/// `(seed, round)`, and weight them by data size normalized over the cohort.
pub fn sample_clients(data_sizes: &[f64], fraction: f64, round: usize, seed: u64) -> Result<RoundPlan> {
    let n = data_sizes.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no clients to sample from".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("client fraction must be in (0, 1], got {fraction}")));
    }
    if data_sizes.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
        return Err(Error::InvalidArgument("client data sizes must be finite and non-negative".into()));
    }
    let k = cohort_size(n, fraction);
    let mut clients: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        let mut rng = stream(seed, Purpose::ClientSampling, &[round as u64]);
        index::sample(&mut rng, n, k).into_vec()
    };
    clients.sort_unstable();
    let total: f64 = clients.iter().map(|&c| data_sizes[c]).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(format!("round {round}: sampled clients hold no data")));
    }
    let weights = clients.iter().map(|&c| data_sizes[c] / total).collect();
    Ok(RoundPlan { round, clients, weights })
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Upload<'a> {
    pub client: usize,
    pub q: &'a Matrix,
    pub weight: f64,
}

/// Weighted average Σ w_k Q_k.
///
/// Uploads are combined in ascending client order regardless of the order
/// given, as Q_first + Σ w_k (Q_k − Q_first), and each entry is clamped to
/// the range spanned by the uploads. The result is therefore independent of
/// arrival order, exactly equal to the input when all uploads agree, and
/// always inside the per-entry convex hull.
pub fn fedavg(uploads: &[Upload<'_>]) -> Result<Matrix> {
    let mut sorted: Vec<&Upload<'_>> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let first = sorted.first().ok_or_else(|| Error::InvalidArgument("no uploads to aggregate".into()))?;
    let (rows, cols) = first.q.shape();
    let mut sum = 0.0;
    for u in &sorted {
        u.q.ensure_shape(rows, cols)?;
        if !(u.weight.is_finite() && u.weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("client {}: invalid weight {}", u.client, u.weight)));
        }
        sum += u.weight;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}, expected 1")));
    }
    if sorted.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(Error::InvalidArgument("duplicate client id in uploads".into()));
    }

    let anchor = first.q.as_slice();
    let mut acc = vec![0.0; anchor.len()];
    let mut lo = anchor.to_vec();
    let mut hi = anchor.to_vec();
    for u in &sorted[1..] {
        let w = u.weight;
        for ((((s, l), h), &v), &a) in acc.iter_mut().zip(lo.iter_mut()).zip(hi.iter_mut()).zip(u.q.as_slice()).zip(anchor) {
            *s += w * (v - a);
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    let data = anchor
        .iter()
        .zip(&acc)
        .zip(lo.iter().zip(&hi))
        .map(|((&a, &s), (&l, &h))| (a + s).clamp(l, h))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Aggregate `(matrix, weight)` pairs, taking list position as the client order.
pub fn fedavg_weighted(uploads: &[(&Matrix, f64)]) -> Result<Matrix> {
    let ups: Vec<Upload<'_>> = uploads
        .iter()
        .enumerate()
        .map(|(client, &(q, weight))| Upload { client, q, weight })
        .collect();
    fedavg(&ups)
}
