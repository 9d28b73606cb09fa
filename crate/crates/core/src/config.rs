//! Experiment configuration: a versioned JSON document whose missing fields
//! fall back to the standard protocol defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::client::{ClientConfig, OptimizerKind, Variant};
use crate::data::RatingFormat;
use crate::embedding::AdamConfig;
use crate::error::{Error, Result};
use crate::privacy::{ClipScope, LdpConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Ratings file, or a directory written by `prepare-data`.
    pub path: PathBuf,
    pub format: RatingFormat,
    pub min_interactions: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::new(),
            format: RatingFormat::TabSeparated,
            min_interactions: 10,
        }
    }
}

/// Independent seeds for each source of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Negative sampling (training and evaluation) and batch shuffling.
    pub data: u64,
    /// Global and client parameter initialization.
    pub init: u64,
    /// Per-round client selection.
    pub sampling: u64,
    /// Laplace noise.
    pub noise: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Seeds {
        Seeds {
            data: seed,
            init: seed,
            sampling: seed,
            noise: seed,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::all(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    /// Tracked clients. Empty means the first `n_clients` users.
    pub clients: Vec<usize>,
    pub n_clients: usize,
    /// Items per client entering the skew terms: its training positives and
    /// an equal share of its evaluation negatives, capped at this count.
    pub max_items: usize,
    /// Also record user-embedding trajectories for the tracked clients.
    pub trajectories: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: true,
            clients: Vec::new(),
            n_clients: 8,
            max_items: 64,
            trajectories: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub variant: Variant,
    pub dim: usize,
    pub rank: usize,
    pub rounds: usize,
    pub item_epochs: usize,
    pub personal_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub buffer_lr: f64,
    pub client_fraction: f64,
    pub train_negatives: usize,
    pub eval_negatives: usize,
    pub top_k: usize,
    pub eval_interval: usize,
    /// Rank against every non-interacted item instead of sampled negatives.
    pub full_catalog_eval: bool,
    /// Evaluate with personalization buffers merged in.
    pub eval_merged: bool,
    /// Std of the normal init for embeddings and B (1.0 matches common embedding-layer defaults).
    pub init_std: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub persist_optimizer: bool,
    pub decoupled: bool,
    pub freeze_b: bool,
    pub ldp: LdpConfig,
    pub seeds: Seeds,
    pub diagnostics: DiagnosticsConfig,
    /// Rounds between snapshots; 0 disables periodic snapshots.
    pub snapshot_interval: usize,
    /// Periodic snapshots kept on disk (the final snapshot is always kept).
    pub keep_snapshots: usize,
    pub per_user_csv: bool,
    /// Not part of the config identity.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            variant: Variant::Clr,
            dim: 16,
            rank: 2,
            rounds: 100,
            item_epochs: 10,
            personal_epochs: 10,
            batch_size: 256,
            lr: 0.01,
            buffer_lr: 0.01,
            client_fraction: 0.6,
            train_negatives: 4,
            eval_negatives: 99,
            top_k: 10,
            eval_interval: 5,
            full_catalog_eval: false,
            eval_merged: true,
            init_std: 1.0,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            persist_optimizer: false,
            decoupled: true,
            freeze_b: false,
            ldp: LdpConfig::default(),
            seeds: Seeds::default(),
            diagnostics: DiagnosticsConfig::default(),
            snapshot_interval: 5,
            keep_snapshots: 2,
            per_user_csv: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.buffer_lr >= 0.0 && self.buffer_lr.is_finite()) {
            return bad(format!("buffer_lr must be >= 0, got {}", self.buffer_lr));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client_fraction must be in (0, 1], got {}", self.client_fraction));
        }
        if self.dim == 0 || self.batch_size == 0 || self.top_k == 0 {
            return bad("dim, batch_size and top_k must be positive".into());
        }
        if self.variant == Variant::Clr && (self.rank == 0 || self.rank > self.dim) {
            return bad(format!("rank must be in 1..={}, got {}", self.dim, self.rank));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if self.eval_negatives == 0 && !self.full_catalog_eval {
            return bad("eval_negatives must be positive".into());
        }
        self.ldp.validate()
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            variant: self.variant,
            dim: self.dim,
            rank: self.rank,
            item_epochs: self.item_epochs,
            personal_epochs: self.personal_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            buffer_lr: self.buffer_lr,
            train_negatives: self.train_negatives,
            init_std: self.init_std,
            optimizer: self.optimizer,
            adam: self.adam,
            persist_optimizer: self.persist_optimizer,
            decoupled: self.decoupled,
            freeze_b: self.freeze_b,
            batch_clip: match (self.ldp.enabled, self.ldp.clip_scope) {
                (true, ClipScope::PerBatch) => self.ldp.clip_threshold,
                _ => None,
            },
        }
    }

    /// The config as JSON without fields that do not affect results.
    pub fn identity(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
        }
        v
    }

    /// SHA-256 of the canonical identity JSON, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.identity()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Set a dotted field path (e.g. `ldp.noise_scale`) from a JSON-ish string.
    /// Short aliases: `beta` → `buffer_lr`, `eta` → `lr`, `lambda` → `ldp.noise_scale`
    /// (also enables LDP), `r` → `rank`, `seed` → every seed.
    pub fn with_param(&self, key: &str, raw: &str) -> Result<ExperimentConfig> {
        let mut v = serde_json::to_value(self)?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let paths: Vec<&str> = match key {
            "beta" => vec!["buffer_lr"],
            "eta" => vec!["lr"],
            "r" => vec!["rank"],
            "lambda" => vec!["ldp.noise_scale"],
            "seed" => vec!["seeds.data", "seeds.init", "seeds.sampling", "seeds.noise"],
            other => vec![other],
        };
        for path in &paths {
            set_path(&mut v, path, value.clone())?;
        }
        if key == "lambda" {
            set_path(&mut v, "ldp.enabled", Value::Bool(true))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {part} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config field {path:?}")));
        }
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

/// Leaf-level differences between two configs, as `path: old -> new` lines.
pub fn config_diff(old: &ExperimentConfig, new: &ExperimentConfig) -> Vec<String> {
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    flatten("", &old.identity(), &mut a);
    flatten("", &new.identity(), &mut b);
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |m: &BTreeMap<String, Value>| m.get(k).map_or("<absent>".to_string(), Value::to_string);
            format!("{k}: {} -> {}", show(&a), show(&b))
        })
        .collect()
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}
