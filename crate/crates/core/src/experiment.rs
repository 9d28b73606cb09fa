//! The round loop: sampling, local updates, optional privatization,
//! aggregation overlapped with personalization, evaluation, diagnostics,
//! snapshots, resumption, sweeps and seed repeats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::client::{Buffer, ClientConfig, ClientState, LocalUpdate, RoundContext, Variant};
use crate::config::{config_diff, ExperimentConfig, Seeds};
use crate::data::{self, ImplicitDataset, NegativeSampler};
use crate::diagnostics::{write_reports, SkewReport, SkewTracker, TrajectoryLog};
use crate::embedding::io::{read_json, read_matrix, write_json_atomic, write_matrix, TensorInfo};
use crate::embedding::{FullBuffer, LowRankBuffer, Matrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, write_per_user_csv, EvalSet, Evaluation};
use crate::privacy::{epsilon, percentile, privatize_upload, sensitivity_bound, ClipScope};
use crate::rng::{stream, Purpose};
use crate::server::{fedavg, sample_clients, RoundPlan, Upload};

pub const MANIFEST_VERSION: u32 = 1;
pub const SNAPSHOT_VERSION: u32 = 1;

/// Environment variable overriding the output directory.
pub const ENV_OUTPUT_DIR: &str = "FEDCLR_OUTPUT_DIR";
/// Environment variable setting the worker-thread count.
pub const ENV_THREADS: &str = "FEDCLR_THREADS";

/// How to execute a run. None of these affect results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Single worker thread, no overlap.
    pub serial: bool,
    pub threads: Option<usize>,
    /// Run personalization concurrently with aggregation.
    pub overlap: bool,
    /// Stop (with a snapshot) after this round, as if interrupted.
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            serial: false,
            threads: None,
            overlap: true,
            stop_after: None,
        }
    }
}

impl RunOptions {
    /// Defaults plus the thread count from the environment.
    pub fn from_env() -> RunOptions {
        RunOptions {
            threads: std::env::var(ENV_THREADS).ok().and_then(|v| v.parse().ok()),
            ..RunOptions::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if self.serial {
            b = b.num_threads(1);
        } else if let Some(n) = self.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// Parameter counts per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub user: usize,
    /// The item matrix exchanged with the server.
    pub shared: usize,
    /// Personalization buffer kept on the client.
    pub buffer: usize,
}

impl ParamCounts {
    pub fn for_variant(variant: Variant, m: usize, d: usize, r: usize) -> ParamCounts {
        let buffer = match variant {
            Variant::FedMf => 0,
            Variant::Af | Variant::Cf => m * d,
            Variant::Clr => r * (m + d),
        };
        ParamCounts {
            user: d,
            shared: m * d,
            buffer,
        }
    }
}

/// Summary of a run, written to `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub rounds_completed: usize,
    pub finished: bool,
    pub param_counts: ParamCounts,
    /// Clip threshold in effect (explicit or derived from the first round).
    pub clip_threshold: Option<f64>,
    /// Largest per-round ε over clients and rounds, from the sensitivity bound.
    pub max_round_epsilon: Option<f64>,
    pub eval_truncated_users: usize,
    pub metrics: Vec<MetricRow>,
    pub best: Option<MetricRow>,
    pub final_metrics: Option<MetricRow>,
    pub round_seconds: Vec<f64>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    /// The manifest without wall-clock timings and file locations.
    pub fn deterministic_view(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        if let Value::Object(map) = &mut v {
            map.remove("round_seconds");
            map.remove("artifacts");
            if let Some(Value::Object(cfg)) = map.get_mut("config") {
                cfg.remove("output_dir");
            }
        }
        v
    }
}

/// Everything accumulated over rounds that is not model state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct History {
    metrics: Vec<MetricRow>,
    plans: Vec<RoundPlan>,
    reports: Vec<SkewReport>,
    tracker: SkewTracker,
    trajectories: TrajectoryLog,
    round_seconds: Vec<f64>,
    clip_threshold: Option<f64>,
    max_round_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotManifest {
    format_version: u32,
    round: usize,
    variant: Variant,
    seeds: Seeds,
    config: ExperimentConfig,
    config_hash: String,
    tensors: BTreeMap<String, TensorInfo>,
    last_rounds: Vec<Option<usize>>,
    history: History,
}

/// Model state loaded from a snapshot directory.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub round: usize,
    pub config: ExperimentConfig,
    pub dataset: ImplicitDataset,
    pub global: Matrix,
    pub clients: Vec<ClientState>,
    history: History,
}

impl Snapshot {
    /// User-embedding trajectories recorded up to this snapshot.
    pub fn trajectories(&self) -> &TrajectoryLog {
        &self.history.trajectories
    }

    /// Skew reports recorded during training up to this snapshot.
    pub fn reports(&self) -> &[SkewReport] {
        &self.history.reports
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.history.metrics
    }
}

struct Run {
    cfg: ExperimentConfig,
    client_cfg: ClientConfig,
    ds: ImplicitDataset,
    sampler: NegativeSampler,
    eval_set: EvalSet,
    global: Matrix,
    clients: Vec<ClientState>,
    tracked: Vec<usize>,
    diag_pairs: BTreeMap<usize, Vec<(usize, f64)>>,
    history: History,
    next_round: usize,
}

/// Resolve the output directory, honoring the environment override.
pub fn resolve_output_dir(cfg: &mut ExperimentConfig) {
    if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
        if !dir.is_empty() {
            cfg.output_dir = Some(PathBuf::from(dir));
        }
    }
}

/// Load and prepare the configured dataset.
pub fn load_experiment_dataset(cfg: &ExperimentConfig) -> Result<ImplicitDataset> {
    let path = &cfg.dataset.path;
    if path.as_os_str().is_empty() {
        return Err(Error::Config("dataset.path is not set".into()));
    }
    if !path.exists() {
        return Err(Error::Config(format!("dataset not found: {}", path.display())));
    }
    data::prepare(path, cfg.dataset.format, cfg.dataset.min_interactions)
}

/// SHA-256 over the split, hex encoded.
pub fn dataset_hash(ds: &ImplicitDataset) -> String {
    let mut h = Sha256::new();
    h.update(format!("{} {}\n", ds.n_users(), ds.n_items()).as_bytes());
    for (u, items) in ds.train_positives.iter().enumerate() {
        h.update(format!("{u}:").as_bytes());
        for i in items {
            h.update(format!("{i},").as_bytes());
        }
        h.update(format!(";{}\n", ds.test_item[u]).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Train from scratch on the configured dataset.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let ds = load_experiment_dataset(cfg)?;
    run_on_dataset(cfg, ds, opts)
}

/// Train from scratch on an already prepared dataset.
pub fn run_on_dataset(cfg: &ExperimentConfig, ds: ImplicitDataset, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let pool = opts.pool()?;
    pool.install(|| {
        let mut run = Run::fresh(cfg.clone(), ds)?;
        if let Some(dir) = &cfg.output_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json_atomic(&dir.join("config.json"), cfg)?;
        }
        run.execute(opts)
    })
}

/// Continue the run in `dir` from its latest snapshot. When `cfg` is given
/// it must match the snapshot's config (apart from the round count, which
/// may be extended, and the output directory).
pub fn resume(dir: &Path, cfg: Option<&ExperimentConfig>, opts: &RunOptions) -> Result<RunManifest> {
    let snap_dir = latest_snapshot(dir)?.ok_or_else(|| Error::Snapshot {
        path: dir.to_path_buf(),
        message: "no snapshot to resume from".into(),
    })?;
    let snap = load_snapshot(&snap_dir)?;
    let mut target = snap.config.clone();
    if let Some(cfg) = cfg {
        let mut expected = cfg.clone();
        expected.rounds = snap.config.rounds;
        let diff = config_diff(&snap.config, &expected);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join("\n")));
        }
        target.rounds = cfg.rounds;
    }
    target.output_dir = Some(dir.to_path_buf());
    if snap.round >= target.rounds {
        let path = dir.join("manifest.json");
        if path.exists() {
            let m: RunManifest = read_json(&path)?;
            if m.finished {
                return Ok(m);
            }
        }
    }
    if target.persist_optimizer {
        return Err(Error::Config("runs with persist_optimizer keep optimizer moments in memory only and cannot be resumed".into()));
    }
    let pool = opts.pool()?;
    pool.install(|| {
        let mut run = Run::from_snapshot(target, snap)?;
        write_json_atomic(&dir.join("config.json"), &run.cfg)?;
        run.execute(opts)
    })
}

impl Run {
    fn fresh(cfg: ExperimentConfig, ds: ImplicitDataset) -> Result<Run> {
        let client_cfg = cfg.client_config();
        client_cfg.validate(ds.n_items())?;
        let mut rng = stream(cfg.seeds.init, Purpose::GlobalInit, &[]);
        let global = Matrix::random_normal(ds.n_items(), cfg.dim, cfg.init_std, &mut rng);
        let clients = (0..ds.n_users())
            .map(|u| ClientState::new(u, ds.user_weights[u], &global, &client_cfg, cfg.seeds.init))
            .collect::<Result<Vec<_>>>()?;
        Run::assemble(cfg, ds, global, clients, History::default(), 0)
    }

    fn from_snapshot(cfg: ExperimentConfig, snap: Snapshot) -> Result<Run> {
        let next = snap.round + 1;
        Run::assemble(cfg, snap.dataset, snap.global, snap.clients, snap.history, next)
    }

    fn assemble(
        cfg: ExperimentConfig,
        ds: ImplicitDataset,
        global: Matrix,
        clients: Vec<ClientState>,
        history: History,
        next_round: usize,
    ) -> Result<Run> {
        let client_cfg = cfg.client_config();
        let sampler = NegativeSampler::new(&ds, cfg.seeds.data);
        let eval_set = EvalSet::new(&ds, &sampler, cfg.eval_negatives, cfg.full_catalog_eval)?;
        let tracked: Vec<usize> = if !cfg.diagnostics.enabled {
            Vec::new()
        } else if cfg.diagnostics.clients.is_empty() {
            (0..ds.n_users().min(cfg.diagnostics.n_clients)).collect()
        } else {
            cfg.diagnostics.clients.clone()
        };
        if let Some(&bad) = tracked.iter().find(|&&c| c >= ds.n_users()) {
            return Err(Error::Config(format!("diagnostic client {bad} does not exist")));
        }
        let half = (cfg.diagnostics.max_items / 2).max(1);
        let diag_pairs = tracked
            .iter()
            .map(|&u| {
                let pos = ds.train_positives[u].iter().take(half).map(|&i| (i, 1.0));
                let neg = eval_set.candidates[u].iter().skip(1).take(half).map(|&i| (i, 0.0));
                (u, pos.chain(neg).collect())
            })
            .collect();
        let mut history = history;
        if history.trajectories.dim == 0 {
            history.trajectories = TrajectoryLog::new(cfg.dim);
        }
        Ok(Run {
            cfg,
            client_cfg,
            ds,
            sampler,
            eval_set,
            global,
            clients,
            tracked,
            diag_pairs,
            history,
            next_round,
        })
    }

    fn evaluate(&self) -> Result<Evaluation> {
        evaluate_all(&self.clients, &self.ds, &self.eval_set, self.cfg.top_k, self.cfg.eval_merged)
    }

    fn record_metrics(&mut self, round: usize) -> Result<()> {
        let e = self.evaluate()?;
        log::info!(
            "{} round {round}: HR@{k} {:.4} NDCG@{k} {:.4}",
            self.cfg.variant,
            e.result.hr,
            e.result.ndcg,
            k = self.cfg.top_k
        );
        self.history.metrics.push(MetricRow {
            round,
            hr: e.result.hr,
            ndcg: e.result.ndcg,
        });
        Ok(())
    }

    fn execute(&mut self, opts: &RunOptions) -> Result<RunManifest> {
        let rounds = self.cfg.rounds;
        if self.next_round == 0 {
            self.record_metrics(0)?;
            self.next_round = 1;
        }
        while self.next_round <= rounds {
            let t = self.next_round;
            let started = Instant::now();
            self.round(t, opts)?;
            self.next_round = t + 1;
            if t % self.cfg.eval_interval == 0 || t == rounds {
                self.record_metrics(t)?;
            }
            self.history.round_seconds.push(started.elapsed().as_secs_f64());
            if let Some(dir) = self.cfg.output_dir.clone() {
                let periodic = self.cfg.snapshot_interval > 0 && t % self.cfg.snapshot_interval == 0;
                let stopping = opts.stop_after == Some(t);
                if t < rounds && (periodic || stopping) {
                    self.write_snapshot(&dir, &format!("round_{t:05}"))?;
                    prune_snapshots(&dir, self.cfg.keep_snapshots.max(1))?;
                }
            }
            if opts.stop_after == Some(t) && t < rounds {
                return self.finish(false);
            }
        }
        if let Some(dir) = self.cfg.output_dir.clone() {
            self.write_snapshot(&dir, "final")?;
        }
        self.finish(true)
    }

    fn round(&mut self, t: usize, opts: &RunOptions) -> Result<()> {
        let cfg = &self.cfg;
        let plan = sample_clients(&self.ds.user_weights, cfg.client_fraction, t, cfg.seeds.sampling)?;
        let mut selected = vec![false; self.clients.len()];
        for &c in &plan.clients {
            selected[c] = true;
        }
        let ctx = RoundContext {
            dataset: &self.ds,
            sampler: &self.sampler,
            config: &self.client_cfg,
            seed: cfg.seeds.data,
            round: t,
        };
        let wrap = |client: usize| move |e: Error| Error::Round {
            round: t,
            client,
            source: Box::new(e),
        };

        let global = &self.global;
        let mut updates: Vec<(usize, LocalUpdate)> = self
            .clients
            .par_iter_mut()
            .filter(|c| selected[c.user])
            .map(|c| c.local_update(global, &ctx).map(|u| (c.user, u)).map_err(wrap(c.user)))
            .collect::<Result<_>>()?;

        if cfg.ldp.enabled {
            let clip = match cfg.ldp.clip_scope {
                ClipScope::PerBatch => None,
                ClipScope::RoundTotal => {
                    if self.history.clip_threshold.is_none() {
                        self.history.clip_threshold = match cfg.ldp.clip_threshold {
                            Some(c) => Some(c),
                            None => {
                                let norms = updates
                                    .iter()
                                    .map(|(_, u)| u.upload.sub(global).map(|d| d.frobenius_norm()))
                                    .collect::<Result<Vec<_>>>()?;
                                let c = percentile(&norms, 0.95).filter(|&c| c > 0.0).unwrap_or(f64::MIN_POSITIVE);
                                log::info!("clip threshold from round {t} update norms (p95): {c}");
                                Some(c)
                            }
                        };
                    }
                    self.history.clip_threshold
                }
            };
            if let ClipScope::PerBatch = cfg.ldp.clip_scope {
                self.history.clip_threshold = cfg.ldp.clip_threshold;
            }
            let (lambda, noise_seed) = (cfg.ldp.noise_scale, cfg.seeds.noise);
            updates.par_iter_mut().try_for_each(|(c, u)| {
                let private = privatize_upload(&u.upload, global, clip, lambda, noise_seed, &[t as u64, *c as u64]).map_err(wrap(*c))?;
                u.upload = private.q;
                Ok::<_, Error>(())
            })?;
            if let Some(c) = self.history.clip_threshold {
                let w_max = plan.weights.iter().cloned().fold(0.0, f64::max);
                let eps = epsilon(sensitivity_bound(w_max, cfg.lr, c), lambda);
                let prev = self.history.max_round_epsilon.unwrap_or(0.0);
                self.history.max_round_epsilon = Some(prev.max(eps));
            }
        }

        let uploads: Vec<Upload<'_>> = updates
            .iter()
            .zip(&plan.weights)
            .map(|((c, u), &w)| Upload {
                client: *c,
                q: &u.upload,
                weight: w,
            })
            .collect();
        let tracked = &self.tracked;
        let p_before: BTreeMap<usize, Vec<f64>> = tracked
            .iter()
            .filter(|&&c| selected[c])
            .map(|&c| (c, self.clients[c].p.clone()))
            .collect();
        let clients = &mut self.clients;
        let mut personalize = || {
            clients
                .par_iter_mut()
                .filter(|c| selected[c.user])
                .try_for_each(|c| c.personalize(&ctx).map(|_| ()).map_err(wrap(c.user)))
        };
        let (aggregated, personalized) = if opts.overlap && !opts.serial {
            rayon::join(|| fedavg(&uploads), personalize)
        } else {
            let a = fedavg(&uploads);
            (a, personalize())
        };
        let new_global = aggregated?;
        personalized?;
        drop(uploads);
        drop(updates);

        for (&c, p) in &p_before {
            let pairs = &self.diag_pairs[&c];
            let q_local = &self.clients[c].q;
            let report = SkewReport::compute(t, c, p, q_local, &new_global, pairs, cfg.lr)?;
            let report = self.history.tracker.observe(report, p, q_local, &new_global, cfg.lr)?;
            self.history.reports.push(report);
        }
        if cfg.diagnostics.enabled && cfg.diagnostics.trajectories {
            for &c in &self.tracked {
                self.history.trajectories.record(c, t, &self.clients[c].p)?;
            }
        }
        self.history.plans.push(plan);
        self.global = new_global;
        Ok(())
    }

    fn manifest(&self, finished: bool) -> RunManifest {
        let metrics = self.history.metrics.clone();
        let best = metrics
            .iter()
            .copied()
            .reduce(|a, b| if (b.hr, b.ndcg) > (a.hr, a.ndcg) { b } else { a });
        let mut artifacts = BTreeMap::new();
        if let Some(dir) = &self.cfg.output_dir {
            for (k, f) in [
                ("manifest", "manifest.json"),
                ("config", "config.json"),
                ("metrics", "metrics.csv"),
                ("round_plans", "round_plans.jsonl"),
                ("diagnostics", "diagnostics.jsonl"),
                ("trajectories", "trajectories.csv"),
            ] {
                artifacts.insert(k.to_string(), dir.join(f));
            }
            if finished {
                artifacts.insert("final_snapshot".into(), dir.join("snapshots").join("final"));
            }
            if self.cfg.per_user_csv {
                artifacts.insert("per_user".into(), dir.join("per_user.csv"));
            }
        }
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            dataset_hash: dataset_hash(&self.ds),
            n_users: self.ds.n_users(),
            n_items: self.ds.n_items(),
            n_train: self.ds.n_train(),
            rounds_completed: self.next_round.saturating_sub(1),
            finished,
            param_counts: ParamCounts::for_variant(self.cfg.variant, self.ds.n_items(), self.cfg.dim, self.cfg.rank),
            clip_threshold: self.history.clip_threshold,
            max_round_epsilon: self.history.max_round_epsilon,
            eval_truncated_users: self.eval_set.truncated_users.len(),
            final_metrics: if finished { metrics.last().copied() } else { None },
            best,
            metrics,
            round_seconds: self.history.round_seconds.clone(),
            artifacts,
        }
    }

    fn finish(&self, finished: bool) -> Result<RunManifest> {
        let manifest = self.manifest(finished);
        if let Some(dir) = &self.cfg.output_dir {
            self.write_outputs(dir)?;
            if finished && self.cfg.per_user_csv {
                let e = self.evaluate()?;
                let path = dir.join("per_user.csv");
                let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                write_per_user_csv(f, &self.ds, &e)?;
            }
            write_json_atomic(&dir.join("manifest.json"), &manifest)?;
        }
        Ok(manifest)
    }

    fn write_outputs(&self, dir: &Path) -> Result<()> {
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["round", "hr", "ndcg", "variant", "seed"])?;
        for m in &self.history.metrics {
            w.write_record([
                m.round.to_string(),
                m.hr.to_string(),
                m.ndcg.to_string(),
                self.cfg.variant.to_string(),
                self.cfg.seeds.data.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("round_plans.jsonl");
        let mut text = String::new();
        for p in &self.history.plans {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let path = dir.join("diagnostics.jsonl");
        let mut buf = Vec::new();
        write_reports(&mut buf, &self.history.reports)?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;

        let path = dir.join("trajectories.csv");
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.history.trajectories.write_csv(f)
    }

    fn write_snapshot(&self, run_dir: &Path, name: &str) -> Result<PathBuf> {
        let root = run_dir.join("snapshots");
        let tmp = root.join(format!(".{name}.tmp"));
        let dir = root.join(name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        data::save_dataset(&self.ds, tmp.join("dataset"), self.cfg.seeds.data)?;
        let tensors = write_client_tensors(&tmp, &self.global, &self.clients)?;
        let manifest = SnapshotManifest {
            format_version: SNAPSHOT_VERSION,
            round: self.next_round.saturating_sub(1),
            variant: self.cfg.variant,
            seeds: self.cfg.seeds,
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            tensors,
            last_rounds: self.clients.iter().map(|c| c.last_round).collect(),
            history: self.history.clone(),
        };
        write_json_atomic(&tmp.join("manifest.json"), &manifest)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Write the global matrix and every client's tensors, concatenated per kind.
fn write_client_tensors(dir: &Path, global: &Matrix, clients: &[ClientState]) -> Result<BTreeMap<String, TensorInfo>> {
    let n = clients.len();
    let (m, d) = global.shape();
    let mut tensors = BTreeMap::new();
    tensors.insert("global_q".to_string(), write_matrix(dir, "global_q.bin", global)?);
    let stack = |rows: usize, cols: usize, get: &dyn Fn(&ClientState) -> Option<&[f64]>| -> Result<Option<Matrix>> {
        let mut data = Vec::with_capacity(n * rows * cols);
        for c in clients {
            match get(c) {
                Some(v) => data.extend_from_slice(v),
                None => return Ok(None),
            }
        }
        Matrix::from_vec(n * rows, cols, data).map(Some)
    };
    let p = stack(1, d, &|c| Some(c.p.as_slice()))?.expect("every client has p");
    tensors.insert("clients_p".into(), write_matrix(dir, "clients_p.bin", &p)?);
    let q = stack(m, d, &|c| Some(c.q.as_slice()))?.expect("every client has q");
    tensors.insert("clients_q".into(), write_matrix(dir, "clients_q.bin", &q)?);
    match clients.first().map(|c| &c.buffer) {
        Some(Buffer::LowRank(l)) => {
            let r = l.rank();
            let a = stack(m, r, &|c| match &c.buffer {
                Buffer::LowRank(l) => Some(l.a.as_slice()),
                _ => None,
            })?;
            let b = stack(r, d, &|c| match &c.buffer {
                Buffer::LowRank(l) => Some(l.b.as_slice()),
                _ => None,
            })?;
            let (a, b) = a.zip(b).ok_or_else(|| Error::Data("clients disagree on buffer kind".into()))?;
            tensors.insert("clients_a".into(), write_matrix(dir, "clients_a.bin", &a)?);
            tensors.insert("clients_b".into(), write_matrix(dir, "clients_b.bin", &b)?);
        }
        Some(Buffer::Full(_)) => {
            let w = stack(m, d, &|c| match &c.buffer {
                Buffer::Full(f) => Some(f.w.as_slice()),
                _ => None,
            })?
            .ok_or_else(|| Error::Data("clients disagree on buffer kind".into()))?;
            tensors.insert("clients_w".into(), write_matrix(dir, "clients_w.bin", &w)?);
        }
        _ => {}
    }
    Ok(tensors)
}

fn split_rows(stacked: &Matrix, n: usize, rows: usize) -> Result<Vec<Matrix>> {
    if stacked.rows() != n * rows {
        return Err(Error::shape(format!("{} stacked rows", n * rows), stacked.rows()));
    }
    let cols = stacked.cols();
    stacked
        .as_slice()
        .chunks(rows * cols)
        .map(|chunk| Matrix::from_vec(rows, cols, chunk.to_vec()))
        .collect()
}

/// Load a snapshot directory written by a run.
pub fn load_snapshot(dir: &Path) -> Result<Snapshot> {
    let manifest: SnapshotManifest = read_json(&dir.join("manifest.json"))?;
    let corrupt = |message: String| Error::Snapshot {
        path: dir.to_path_buf(),
        message,
    };
    if manifest.format_version != SNAPSHOT_VERSION {
        return Err(corrupt(format!("unsupported snapshot version {}", manifest.format_version)));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(corrupt("config hash does not match stored config".into()));
    }
    let (dataset, _) = data::load_dataset(dir.join("dataset"))?;
    let tensor = |name: &str| -> Result<Matrix> {
        let info = manifest
            .tensors
            .get(name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        read_matrix(dir, info)
    };
    let global = tensor("global_q")?;
    let (m, d) = global.shape();
    let n = dataset.n_users();
    if m != dataset.n_items() || d != manifest.config.dim || manifest.last_rounds.len() != n {
        return Err(corrupt("tensor shapes disagree with dataset and config".into()));
    }
    let ps = split_rows(&tensor("clients_p")?, n, 1)?;
    let qs = split_rows(&tensor("clients_q")?, n, m)?;
    let mut buffers: Vec<Buffer> = match manifest.config.variant {
        Variant::FedMf => vec![Buffer::None; n],
        Variant::Af | Variant::Cf => split_rows(&tensor("clients_w")?, n, m)?
            .into_iter()
            .map(|w| Buffer::Full(FullBuffer { w }))
            .collect(),
        Variant::Clr => {
            let r = manifest.config.rank;
            let a = split_rows(&tensor("clients_a")?, n, m)?;
            let b = split_rows(&tensor("clients_b")?, n, r)?;
            a.into_iter()
                .zip(b)
                .map(|(a, b)| LowRankBuffer::from_parts(a, b).map(Buffer::LowRank))
                .collect::<Result<_>>()?
        }
    };
    let clients = ps
        .into_iter()
        .zip(qs)
        .enumerate()
        .map(|(u, (p, q))| {
            let buffer = std::mem::replace(&mut buffers[u], Buffer::None);
            ClientState::from_parts(u, dataset.user_weights[u], p.into_vec(), q, buffer, manifest.last_rounds[u])
        })
        .collect();
    Ok(Snapshot {
        round: manifest.round,
        config: manifest.config,
        dataset,
        global,
        clients,
        history: manifest.history,
    })
}

/// Latest snapshot under `run_dir/snapshots`: `final` if present, else the highest round.
pub fn latest_snapshot(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join("snapshots");
    if !root.exists() {
        return Ok(None);
    }
    if root.join("final").join("manifest.json").exists() {
        return Ok(Some(root.join("final")));
    }
    Ok(periodic_snapshots(&root)?.pop().map(|(_, p)| p))
}

fn periodic_snapshots(root: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(r) = name.strip_prefix("round_").and_then(|s| s.parse::<usize>().ok()) {
            out.push((r, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn prune_snapshots(run_dir: &Path, keep: usize) -> Result<()> {
    let snaps = periodic_snapshots(&run_dir.join("snapshots"))?;
    let excess = snaps.len().saturating_sub(keep);
    for (_, path) in snaps.into_iter().take(excess) {
        fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Evaluate a snapshot's clients on its own dataset and config.
pub fn evaluate_snapshot(snap: &Snapshot) -> Result<Evaluation> {
    let cfg = &snap.config;
    let sampler = NegativeSampler::new(&snap.dataset, cfg.seeds.data);
    let set = EvalSet::new(&snap.dataset, &sampler, cfg.eval_negatives, cfg.full_catalog_eval)?;
    evaluate_all(&snap.clients, &snap.dataset, &set, cfg.top_k, cfg.eval_merged)
}

/// Skew reports for `clients` (default: the configured diagnostic clients)
/// measuring each client's stored Q_u against the snapshot's global matrix.
pub fn diagnose_snapshot(snap: &Snapshot, clients: Option<&[usize]>) -> Result<Vec<SkewReport>> {
    let mut cfg = snap.config.clone();
    cfg.diagnostics.enabled = true;
    if let Some(c) = clients {
        cfg.diagnostics.clients = c.to_vec();
    }
    let run = Run::assemble(cfg, snap.dataset.clone(), snap.global.clone(), Vec::new(), History::default(), 0)?;
    run.tracked
        .iter()
        .map(|&c| {
            let client = &snap.clients[c];
            SkewReport::compute(snap.round, c, &client.p, &client.q, &snap.global, &run.diag_pairs[&c], run.cfg.lr)
        })
        .collect()
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub dir: Option<PathBuf>,
    pub manifest: RunManifest,
}

/// Run `base` once per value of `param`, each in `out/<param>=<value>`.
pub fn sweep(base: &ExperimentConfig, param: &str, values: &[String], out: Option<&Path>, opts: &RunOptions) -> Result<Vec<SweepPoint>> {
    base.validate()?;
    let ds = load_experiment_dataset(base)?;
    let mut points = Vec::new();
    for v in values {
        let mut cfg = base.with_param(param, v)?;
        let dir = out.map(|o| o.join(format!("{param}={v}")));
        cfg.output_dir = dir.clone();
        let manifest = run_on_dataset(&cfg, ds.clone(), opts)?;
        points.push(SweepPoint {
            value: v.clone(),
            dir,
            manifest,
        });
    }
    if let Some(o) = out {
        let path = o.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["param", "value", "final_hr", "final_ndcg", "best_round", "best_hr", "best_ndcg"])?;
        for p in &points {
            let f = p.manifest.final_metrics;
            let b = p.manifest.best;
            w.write_record([
                param.to_string(),
                p.value.clone(),
                f.map_or(String::new(), |m| m.hr.to_string()),
                f.map_or(String::new(), |m| m.ndcg.to_string()),
                b.map_or(String::new(), |m| m.round.to_string()),
                b.map_or(String::new(), |m| m.hr.to_string()),
                b.map_or(String::new(), |m| m.ndcg.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(points)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub final_hr: MeanStd,
    pub final_ndcg: MeanStd,
    pub best_hr: MeanStd,
    pub best_ndcg: MeanStd,
    pub runs: Vec<RunManifest>,
}

/// Run `cfg` with seeds offset by 0..n (every seed shifted together), each
/// in `out/seed_<k>`, and average the metrics.
pub fn run_repeats(cfg: &ExperimentConfig, n: usize, opts: &RunOptions) -> Result<RepeatSummary> {
    cfg.validate()?;
    let ds = load_experiment_dataset(cfg)?;
    let mut runs = Vec::new();
    let mut seeds = Vec::new();
    for k in 0..n as u64 {
        let mut c = cfg.clone();
        let s = cfg.seeds;
        c.seeds = Seeds {
            data: s.data + k,
            init: s.init + k,
            sampling: s.sampling + k,
            noise: s.noise + k,
        };
        c.output_dir = cfg.output_dir.as_ref().map(|o| o.join(format!("seed_{}", c.seeds.data)));
        seeds.push(c.seeds.data);
        runs.push(run_on_dataset(&c, ds.clone(), opts)?);
    }
    let pick = |f: &dyn Fn(&RunManifest) -> Option<f64>| MeanStd::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
    let summary = RepeatSummary {
        seeds,
        final_hr: pick(&|m| m.final_metrics.map(|x| x.hr)),
        final_ndcg: pick(&|m| m.final_metrics.map(|x| x.ndcg)),
        best_hr: pick(&|m| m.best.map(|x| x.hr)),
        best_ndcg: pick(&|m| m.best.map(|x| x.ndcg)),
        runs,
    };
    if let Some(o) = &cfg.output_dir {
        write_json_atomic(&o.join("repeats.json"), &summary)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        let c = ParamCounts::for_variant(Variant::Clr, 1682, 16, 2);
        assert_eq!(c.buffer, 3396);
        assert_eq!(ParamCounts::for_variant(Variant::FedMf, 1682, 16, 2).buffer, 0);
        assert_eq!(ParamCounts::for_variant(Variant::Cf, 10, 4, 2).buffer, 40);
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
