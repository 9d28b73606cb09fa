//! Local differential privacy for uploads: update clipping and Laplace noise.

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// What the clipping threshold bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipScope {
    /// The whole round's change Q_u − Q_g_prev.
    #[default]
    RoundTotal,
    /// Every batch's item gradient during local training.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdpConfig {
    pub enabled: bool,
    /// λ, the Laplace scale.
    pub noise_scale: f64,
    /// C. `None` picks the 95th percentile of the first round's unclipped update norms.
    pub clip_threshold: Option<f64>,
    pub clip_scope: ClipScope,
}

impl Default for LdpConfig {
    fn default() -> Self {
        LdpConfig {
            enabled: false,
            noise_scale: 0.5,
            clip_threshold: None,
            clip_scope: ClipScope::RoundTotal,
        }
    }
}

impl LdpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) || self.noise_scale.is_nan() {
            return Err(Error::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_threshold must be > 0, got {c}")));
            }
        }
        if self.enabled && self.clip_scope == ClipScope::PerBatch && self.clip_threshold.is_none() {
            return Err(Error::Config("per-batch clipping needs an explicit clip_threshold".into()));
        }
        Ok(())
    }
}

/// Scale `delta` down to Frobenius norm `c` if it is longer.
pub fn clip_update(delta: &Matrix, c: f64) -> Matrix {
    let norm = delta.frobenius_norm();
    let mut out = delta.clone();
    if norm > c {
        out.scale(c / norm);
    }
    out
}

/// One Laplace(0, λ) draw by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Q + i.i.d. Laplace(0, λ) noise.
pub fn add_laplace<R: Rng + ?Sized>(q: &Matrix, scale: f64, rng: &mut R) -> Matrix {
    let mut out = q.clone();
    if scale == 0.0 {
        return out;
    }
    for x in out.as_mut_slice() {
        *x += sample_laplace(rng, scale);
    }
    out
}

/// [`add_laplace`] with a stream keyed by `(seed, keys)`.
pub fn add_laplace_seeded(q: &Matrix, scale: f64, seed: u64, keys: &[u64]) -> Matrix {
    add_laplace(q, scale, &mut stream(seed, Purpose::LaplaceNoise, keys))
}

/// Global sensitivity bound 2·p_u·η·C.
pub fn sensitivity_bound(weight: f64, lr: f64, clip: f64) -> f64 {
    2.0 * weight * lr * clip
}

/// Per-round ε = S/λ. Infinite when no noise is added.
pub fn epsilon(sensitivity: f64, noise_scale: f64) -> f64 {
    if noise_scale == 0.0 {
        f64::INFINITY
    } else {
        sensitivity / noise_scale
    }
}

/// The wire copy of a client's upload.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateUpload {
    pub q: Matrix,
    /// ‖Q_u − Q_g_prev‖ before clipping.
    pub update_norm: f64,
    pub clipped: bool,
}

/// Clip the round-total update to `clip` and add Laplace(0, λ) noise.
/// With no clipping triggered and λ = 0 the upload is returned bit-for-bit.
pub fn privatize_upload(
    upload: &Matrix,
    downloaded: &Matrix,
    clip: Option<f64>,
    noise_scale: f64,
    seed: u64,
    keys: &[u64],
) -> Result<PrivateUpload> {
    let delta = upload.sub(downloaded)?;
    let update_norm = delta.frobenius_norm();
    let (base, clipped) = match clip {
        Some(c) if update_norm > c => (downloaded.add(&clip_update(&delta, c))?, true),
        _ => (upload.clone(), false),
    };
    let q = if noise_scale > 0.0 {
        add_laplace_seeded(&base, noise_scale, seed, keys)
    } else {
        base
    };
    Ok(PrivateUpload { q, update_norm, clipped })
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}
