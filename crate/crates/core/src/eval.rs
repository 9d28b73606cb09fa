//! Leave-one-out ranking evaluation: HR@K and NDCG@K.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::data::{ImplicitDataset, NegativeSampler};
use crate::error::{Error, Result};

/// Aggregated ranking metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    pub users: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// 1 + the number of other candidates scoring at least as high as the test
/// item. Ties count against the test item; so do NaN scores.
pub fn rank_of(test_score: f64, others: &[f64]) -> usize {
    1 + others.iter().filter(|&&s| !(s < test_score)).count()
}

/// Rank of `test_item` among `candidates` scored by `scores`.
pub fn rank_test_item(candidates: &[usize], scores: &[f64], test_item: usize) -> Result<usize> {
    if candidates.len() != scores.len() {
        return Err(Error::shape(format!("{} scores", candidates.len()), scores.len()));
    }
    let pos = candidates
        .iter()
        .position(|&c| c == test_item)
        .ok_or_else(|| Error::InvalidArgument(format!("test item {test_item} is not among the candidates")))?;
    let test = scores[pos];
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != pos && !(s < test))
        .count())
}

/// Per-user NDCG contribution: 1/log2(rank + 1) inside the top K.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<EvalResult> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to evaluate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
    let ndcg: f64 = ranks.iter().map(|&r| ndcg_at(r, k)).sum();
    Ok(EvalResult {
        k,
        users: ranks.len(),
        hr: hits / n,
        ndcg: ndcg / n,
    })
}

/// Fixed candidate lists: each user's test item followed by its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub candidates: Vec<Vec<usize>>,
    /// Users whose negative pool was smaller than requested.
    pub truncated_users: Vec<usize>,
}

impl EvalSet {
    /// `n_negatives` fixed negatives per user, or the whole remaining
    /// catalog when `full_catalog` is set.
    pub fn new(ds: &ImplicitDataset, sampler: &NegativeSampler, n_negatives: usize, full_catalog: bool) -> Result<EvalSet> {
        let mut candidates = Vec::with_capacity(ds.n_users());
        let mut truncated_users = Vec::new();
        for u in 0..ds.n_users() {
            let negatives = if full_catalog {
                sampler.full_catalog_negatives(u)?
            } else {
                let e = sampler.eval_negatives(u, n_negatives)?;
                if e.truncated && e.items.len() < n_negatives {
                    truncated_users.push(u);
                }
                e.items
            };
            let mut c = Vec::with_capacity(negatives.len() + 1);
            c.push(ds.test_item[u]);
            c.extend(negatives);
            candidates.push(c);
        }
        Ok(EvalSet {
            candidates,
            truncated_users,
        })
    }
}

/// Per-user outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub user: usize,
    pub test_item: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: EvalResult,
    pub per_user: Vec<UserEval>,
}

/// Score every user's candidates with its own (personalized) model.
/// `merged = false` ignores personalization buffers.
pub fn evaluate_all(clients: &[ClientState], ds: &ImplicitDataset, set: &EvalSet, k: usize, merged: bool) -> Result<Evaluation> {
    if clients.len() != ds.n_users() || set.candidates.len() != ds.n_users() {
        return Err(Error::shape(
            format!("{} clients and candidate lists", ds.n_users()),
            format!("{} clients, {} candidate lists", clients.len(), set.candidates.len()),
        ));
    }
    let per_user: Vec<UserEval> = clients
        .par_iter()
        .zip(&set.candidates)
        .map(|(c, cand)| {
            let scores: Vec<f64> = c
                .logits(cand, merged)
                .into_iter()
                .map(crate::embedding::sigmoid)
                .collect();
            let test_item = ds.test_item[c.user];
            Ok(UserEval {
                user: c.user,
                test_item,
                rank: rank_test_item(cand, &scores, test_item)?,
            })
        })
        .collect::<Result<_>>()?;
    let ranks: Vec<usize> = per_user.iter().map(|u| u.rank).collect();
    Ok(Evaluation {
        result: metrics_at_k(&ranks, k)?,
        per_user,
    })
}

/// CSV: user,external_user,test_item,external_item,rank,hit,ndcg.
pub fn write_per_user_csv<W: Write>(out: W, ds: &ImplicitDataset, eval: &Evaluation) -> Result<()> {
    let k = eval.result.k;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user", "external_user", "test_item", "external_item", "rank", "hit", "ndcg"])?;
    for u in &eval.per_user {
        w.write_record([
            u.user.to_string(),
            ds.users.external(u.user).to_string(),
            u.test_item.to_string(),
            ds.items.external(u.test_item).to_string(),
            u.rank.to_string(),
            u8::from(u.rank <= k).to_string(),
            ndcg_at(u.rank, k).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<per-user metrics>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unique_max_is_rank_one() {
        let cand: Vec<usize> = (0..100).collect();
        let mut scores = vec![0.3; 100];
        scores[42] = 0.9;
        assert_eq!(rank_test_item(&cand, &scores, 42).unwrap(), 1);
    }

    #[test]
    fn all_ties_rank_last() {
        let cand: Vec<usize> = (0..100).collect();
        assert_eq!(rank_test_item(&cand, &[0.5; 100], 0).unwrap(), 100);
        assert_eq!(rank_of(0.5, &[0.5; 99]), 100);
    }

    #[test]
    fn missing_test_item() {
        assert!(rank_test_item(&[1, 2], &[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn metric_values() {
        let r = metrics_at_k(&[1], 10).unwrap();
        assert_eq!((r.hr, r.ndcg), (1.0, 1.0));
        let r = metrics_at_k(&[11], 10).unwrap();
        assert_eq!((r.hr, r.ndcg), (0.0, 0.0));
        let r = metrics_at_k(&[10], 10).unwrap();
        assert_eq!(r.hr, 1.0);
        assert_relative_eq!(r.ndcg, 0.28906482631788782, epsilon = 1e-15);
        assert!(metrics_at_k(&[], 10).is_err());
        assert!(metrics_at_k(&[0], 10).is_err());
    }
}
