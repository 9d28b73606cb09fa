#![allow(dead_code)]

use fedclr::config::ExperimentConfig;
use fedclr::data::{IdMap, ImplicitDataset};
use fedclr::embedding::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Users in `groups` taste clusters, each liking mostly items of its own cluster.
pub fn clustered_dataset(n_users: usize, n_items: usize, groups: usize, per_user: usize, seed: u64) -> ImplicitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = n_items / groups;
    let mut train = Vec::with_capacity(n_users);
    let mut test = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let g = u % groups;
        let mut items = Vec::new();
        while items.len() < per_user + 1 {
            let i = if rng.random_bool(0.85) {
                g * block + rng.random_range(0..block)
            } else {
                rng.random_range(0..n_items)
            };
            if !items.contains(&i) {
                items.push(i);
            }
        }
        test.push(items.pop().unwrap());
        train.push(items);
    }
    let users = IdMap::from_ordered((0..n_users).map(|u| format!("u{u}")).collect());
    let items = IdMap::from_ordered((0..n_items).map(|i| format!("i{i}")).collect());
    ImplicitDataset::new(users, items, train, test).unwrap()
}

/// A fast config for synthetic runs.
pub fn small_config(variant: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.variant = variant.parse().unwrap();
    cfg.dim = 4;
    cfg.rank = 2;
    cfg.rounds = 4;
    cfg.item_epochs = 2;
    cfg.personal_epochs = 2;
    cfg.batch_size = 16;
    cfg.eval_negatives = 20;
    cfg.eval_interval = 2;
    cfg.snapshot_interval = 1;
    cfg.diagnostics.n_clients = 3;
    cfg.diagnostics.max_items = 10;
    cfg
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Summed BCE written as softplus(x) − r·x, which is exact for any logit.
pub fn bce_sum(logits: &[f64], labels: &[f64]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &r)| x.max(0.0) + (-x.abs()).exp().ln_1p() - r * x)
        .sum()
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|k| {
            work[k] = x[k] + h;
            let up = f(&work);
            work[k] = x[k] - h;
            let down = f(&work);
            work[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}
