//! Implicit-feedback datasets and the leave-one-out split.

use std::collections::{BTreeMap, HashMap};

use super::raw::{Interaction, RawInteractions};
use crate::error::{Error, Result};

/// Dense index assignment for external ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    external: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Build a map from the given ids. Ids are ordered numerically when they
    /// all parse as integers, lexicographically otherwise.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> IdMap {
        let mut uniq: Vec<String> = ids.into_iter().map(str::to_string).collect();
        uniq.sort();
        uniq.dedup();
        if uniq.iter().all(|s| s.parse::<i64>().is_ok()) {
            uniq.sort_by_key(|s| s.parse::<i64>().expect("checked numeric"));
        }
        IdMap::from_ordered(uniq)
    }

    /// Use `external` as given: position is the dense id.
    pub fn from_ordered(external: Vec<String>) -> IdMap {
        let index = external.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        IdMap { external, index }
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn dense(&self, external: &str) -> Option<usize> {
        self.index.get(external).copied()
    }

    pub fn external(&self, dense: usize) -> &str {
        &self.external[dense]
    }

    pub fn externals(&self) -> &[String] {
        &self.external
    }
}

/// One positive interaction before splitting. `order` is the file position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    pub item: usize,
    pub timestamp: Option<i64>,
    pub order: usize,
}

/// Binarized, filtered, densely indexed interactions (pre-split).
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedData {
    pub users: IdMap,
    pub items: IdMap,
    /// Per-user positives in file order.
    pub positives: Vec<Vec<Positive>>,
}

impl BinarizedData {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

/// Split dataset: per-user training positives and one held-out test item.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDataset {
    pub users: IdMap,
    pub items: IdMap,
    pub train_positives: Vec<Vec<usize>>,
    pub test_item: Vec<usize>,
    /// |D_u|: number of positive training interactions, used as the FedAvg weight.
    pub user_weights: Vec<f64>,
}

impl ImplicitDataset {
    /// Assemble a split dataset, checking every structural invariant.
    pub fn new(
        users: IdMap,
        items: IdMap,
        train_positives: Vec<Vec<usize>>,
        test_item: Vec<usize>,
    ) -> Result<ImplicitDataset> {
        let n = users.len();
        if train_positives.len() != n || test_item.len() != n {
            return Err(Error::Data(format!(
                "{} users but {} train lists and {} test items",
                n,
                train_positives.len(),
                test_item.len()
            )));
        }
        let m = items.len();
        for (u, (train, &test)) in train_positives.iter().zip(&test_item).enumerate() {
            if test >= m || train.iter().any(|&i| i >= m) {
                return Err(Error::Data(format!("user {u}: item index out of range (m = {m})")));
            }
            if train.contains(&test) {
                return Err(Error::Data(format!("user {u}: test item {test} also in train")));
            }
            if train.is_empty() {
                return Err(Error::Data(format!("user {u}: empty training set")));
            }
        }
        let user_weights = train_positives.iter().map(|t| t.len() as f64).collect();
        Ok(ImplicitDataset {
            users,
            items,
            train_positives,
            test_item,
            user_weights,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_train(&self) -> usize {
        self.train_positives.iter().map(Vec::len).sum()
    }

    /// Train positives plus the test item, sorted. Negatives are drawn outside this set.
    pub fn excluded_items(&self, user: usize) -> Vec<usize> {
        let mut ex = self.train_positives[user].clone();
        ex.push(self.test_item[user]);
        ex.sort_unstable();
        ex.dedup();
        ex
    }
}

/// Map every rating > 0 to 1. Zero ratings stay as explicit non-interactions.
pub fn binarize(raw: &RawInteractions) -> RawInteractions {
    RawInteractions {
        records: raw
            .records
            .iter()
            .map(|r| Interaction {
                rating: if r.rating > 0.0 { 1.0 } else { 0.0 },
                ..r.clone()
            })
            .collect(),
    }
}

/// Binarize, drop users with fewer than `min_interactions` positives, and
/// assign dense indices. Every item seen in the log keeps its index even if
/// all of its interactions belonged to filtered users.
pub fn binarize_and_filter(raw: &RawInteractions, min_interactions: usize) -> Result<BinarizedData> {
    if raw.is_empty() {
        return Err(Error::Data("no interactions to binarize".into()));
    }
    let bin = binarize(raw);
    let items = IdMap::from_ids(bin.records.iter().map(|r| r.item.as_str()));

    let mut per_user: BTreeMap<&str, Vec<Positive>> = BTreeMap::new();
    for (order, r) in bin.records.iter().enumerate() {
        if r.rating > 0.0 {
            per_user.entry(r.user.as_str()).or_default().push(Positive {
                item: items.dense(&r.item).expect("item indexed"),
                timestamp: r.timestamp,
                order,
            });
        }
    }
    per_user.retain(|_, p| p.len() >= min_interactions);
    if per_user.is_empty() {
        return Err(Error::Data(format!(
            "every user has fewer than {min_interactions} positive interactions"
        )));
    }
    let users = IdMap::from_ids(per_user.keys().copied());
    let mut positives = vec![Vec::new(); users.len()];
    for (ext, p) in per_user {
        positives[users.dense(ext).expect("user indexed")] = p;
    }
    Ok(BinarizedData {
        users,
        items,
        positives,
    })
}

/// Hold out each user's latest positive. Ties and missing timestamps fall
/// back to file order, last record wins.
pub fn leave_one_out_split(data: BinarizedData) -> Result<ImplicitDataset> {
    let mut train = Vec::with_capacity(data.n_users());
    let mut test = Vec::with_capacity(data.n_users());
    for (u, pos) in data.positives.iter().enumerate() {
        if pos.len() < 2 {
            return Err(Error::Data(format!(
                "user {} has {} positive interaction(s); leave-one-out needs at least 2",
                data.users.external(u),
                pos.len()
            )));
        }
        let held = pos
            .iter()
            .enumerate()
            .max_by_key(|(_, p)| (p.timestamp.unwrap_or(i64::MIN), p.order))
            .map(|(idx, _)| idx)
            .expect("non-empty");
        test.push(pos[held].item);
        train.push(
            pos.iter()
                .enumerate()
                .filter(|&(idx, _)| idx != held)
                .map(|(_, p)| p.item)
                .collect(),
        );
    }
    ImplicitDataset::new(data.users, data.items, train, test)
}
