//! Negative sampling for training and evaluation.

use rand::seq::index;
use rand::Rng;

use super::dataset::ImplicitDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Draws items a user has not interacted with.
///
/// Holds no RNG state: every call derives its own stream from the seed and
/// the call's key, so samplers can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    seed: u64,
    n_items: usize,
    /// Sorted train positives plus test item, per user.
    excluded: Vec<Vec<usize>>,
}

/// Fixed evaluation candidates for one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalNegatives {
    pub items: Vec<usize>,
    /// Set when the pool held fewer items than requested.
    pub truncated: bool,
}

impl NegativeSampler {
    pub fn new(dataset: &ImplicitDataset, seed: u64) -> NegativeSampler {
        NegativeSampler {
            seed,
            n_items: dataset.n_items(),
            excluded: (0..dataset.n_users()).map(|u| dataset.excluded_items(u)).collect(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn excluded(&self, user: usize) -> Result<&[usize]> {
        self.excluded
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown user {user}")))
    }

    pub fn pool_size(&self, user: usize) -> Result<usize> {
        Ok(self.n_items - self.excluded(user)?.len())
    }

    fn pool(&self, excluded: &[usize]) -> Vec<usize> {
        let mut pool = Vec::with_capacity(self.n_items - excluded.len());
        let mut ex = excluded.iter().peekable();
        for item in 0..self.n_items {
            if ex.peek() == Some(&&item) {
                ex.next();
            } else {
                pool.push(item);
            }
        }
        pool
    }

    /// `n_per_positive` uniform draws with replacement per training positive,
    /// keyed by (seed, user, round).
    pub fn sample_train_negatives(&self, user: usize, n_per_positive: usize, round: usize) -> Result<Vec<usize>> {
        self.train_negatives(user, n_per_positive, round, 0)
    }

    /// As [`Self::sample_train_negatives`], with an extra `stage` key so that
    /// separate training passes within one round get independent draws.
    pub fn train_negatives(&self, user: usize, n_per_positive: usize, round: usize, stage: u64) -> Result<Vec<usize>> {
        let excluded = self.excluded(user)?;
        let pool_size = self.n_items - excluded.len();
        if pool_size == 0 {
            return Err(Error::EmptyPool { user });
        }
        // excluded = train positives + test item
        let n_train = excluded.len() - 1;
        let count = n_per_positive * n_train;
        let mut rng = stream(self.seed, Purpose::TrainNegatives, &[user as u64, round as u64, stage]);
        let out = if pool_size * 4 >= self.n_items {
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let item = rng.random_range(0..self.n_items);
                if excluded.binary_search(&item).is_err() {
                    out.push(item);
                }
            }
            out
        } else {
            let pool = self.pool(excluded);
            (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        Ok(out)
    }

    /// `n_eval` distinct negatives fixed for the whole experiment. When the
    /// pool is smaller than `n_eval` the whole pool is returned and flagged.
    pub fn eval_negatives(&self, user: usize, n_eval: usize) -> Result<EvalNegatives> {
        let excluded = self.excluded(user)?;
        let pool = self.pool(excluded);
        if pool.is_empty() {
            return Err(Error::EmptyPool { user });
        }
        if pool.len() <= n_eval {
            if pool.len() < n_eval {
                log::warn!(
                    "user {user}: only {} candidate negatives available, {n_eval} requested; using the whole pool",
                    pool.len()
                );
            }
            return Ok(EvalNegatives {
                items: pool,
                truncated: true,
            });
        }
        let mut rng = stream(self.seed, Purpose::EvalNegatives, &[user as u64]);
        let items = index::sample(&mut rng, pool.len(), n_eval).into_iter().map(|i| pool[i]).collect();
        Ok(EvalNegatives { items, truncated: false })
    }

    /// Every item outside the user's train positives and test item.
    pub fn full_catalog_negatives(&self, user: usize) -> Result<Vec<usize>> {
        Ok(self.pool(self.excluded(user)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::IdMap;

    fn ds(m: usize, train: Vec<Vec<usize>>, test: Vec<usize>) -> ImplicitDataset {
        let users = IdMap::from_ordered((0..train.len()).map(|u| u.to_string()).collect());
        let items = IdMap::from_ordered((0..m).map(|i| i.to_string()).collect());
        ImplicitDataset::new(users, items, train, test).unwrap()
    }

    #[test]
    fn train_negatives_avoid_positives_and_test() {
        let s = NegativeSampler::new(&ds(5, vec![vec![0, 1]], vec![2]), 3);
        let neg = s.sample_train_negatives(0, 4, 1).unwrap();
        assert_eq!(neg.len(), 8);
        assert!(neg.iter().all(|i| *i == 3 || *i == 4));
    }

    #[test]
    fn train_negative_count_and_determinism() {
        let train: Vec<usize> = (0..10).collect();
        let s = NegativeSampler::new(&ds(100, vec![train], vec![50]), 11);
        let a = s.sample_train_negatives(0, 4, 7).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, s.sample_train_negatives(0, 4, 7).unwrap());
        assert_ne!(a, s.sample_train_negatives(0, 4, 8).unwrap());
        assert_ne!(a, s.train_negatives(0, 4, 7, 1).unwrap());
    }

    #[test]
    fn empty_pool_is_error() {
        let s = NegativeSampler::new(&ds(3, vec![vec![0, 1]], vec![2]), 0);
        assert!(matches!(s.sample_train_negatives(0, 4, 0), Err(Error::EmptyPool { user: 0 })));
        assert!(s.sample_train_negatives(5, 4, 0).is_err());
    }

    #[test]
    fn eval_negatives_distinct_and_fixed() {
        let train: Vec<usize> = (0..49).collect();
        let s = NegativeSampler::new(&ds(200, vec![train.clone()], vec![150]), 5);
        let e = s.eval_negatives(0, 99).unwrap();
        assert!(!e.truncated);
        assert_eq!(e.items.len(), 99);
        let mut sorted = e.items.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 99);
        assert!(e.items.iter().all(|i| !train.contains(i) && *i != 150));
        assert_eq!(e, s.eval_negatives(0, 99).unwrap());
    }

    #[test]
    fn small_pool_uses_everything() {
        let train: Vec<usize> = (0..94).collect();
        let s = NegativeSampler::new(&ds(100, vec![train], vec![99]), 5);
        let e = s.eval_negatives(0, 99).unwrap();
        assert!(e.truncated);
        assert_eq!(e.items, vec![94, 95, 96, 97, 98]);
    }

    #[test]
    fn dense_user_uses_explicit_pool() {
        let train: Vec<usize> = (0..95).collect();
        let s = NegativeSampler::new(&ds(100, vec![train], vec![99]), 5);
        let neg = s.sample_train_negatives(0, 4, 0).unwrap();
        assert_eq!(neg.len(), 380);
        assert!(neg.iter().all(|i| (95..99).contains(i)));
    }
}
