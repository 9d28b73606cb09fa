//! Per-client local training: item training with a frozen user embedding,
//! then joint user/buffer personalization against the frozen item matrix.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImplicitDataset, NegativeSampler};
use crate::embedding::{
    batch_gradient, dot, effective_row, sigmoid, AdamConfig, AdamState, BufferView, FullBuffer, LowRankBuffer, Matrix,
    RowAdam, RowGrads, Wants,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Which training recipe every client follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Joint (p, Q) training, no buffer.
    FedMf,
    /// Joint (p, Q) training, then a full buffer W fine-tuned with p frozen.
    Af,
    /// Item training with p frozen, then (p, W) with Q frozen.
    Cf,
    /// Item training with p frozen, then (p, A, B) with Q frozen.
    Clr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FedMf, Variant::Af, Variant::Cf, Variant::Clr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FedMf => "fedmf",
            Variant::Af => "af",
            Variant::Cf => "cf",
            Variant::Clr => "clr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "fedmf" => Ok(Variant::FedMf),
            "af" => Ok(Variant::Af),
            "cf" => Ok(Variant::Cf),
            "clr" => Ok(Variant::Clr),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// Local optimizer. Plain SGD exists for analytical probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Everything a client needs to run its local procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub variant: Variant,
    pub dim: usize,
    pub rank: usize,
    pub item_epochs: usize,
    pub personal_epochs: usize,
    pub batch_size: usize,
    /// η: user and item embeddings.
    pub lr: f64,
    /// β: buffer parameters.
    pub buffer_lr: f64,
    pub train_negatives: usize,
    pub init_std: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    /// Keep Adam moments of p and the buffer across rounds.
    pub persist_optimizer: bool,
    /// When false, CLR/CF run the joint FedMF pass instead of the two-step procedure.
    pub decoupled: bool,
    /// Keep B at its initial value (analysis knob).
    pub freeze_b: bool,
    /// Clip each batch's item-gradient block to this Frobenius norm.
    pub batch_clip: Option<f64>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            variant: Variant::Clr,
            dim: 16,
            rank: 2,
            item_epochs: 10,
            personal_epochs: 10,
            batch_size: 256,
            lr: 0.01,
            buffer_lr: 0.01,
            train_negatives: 4,
            init_std: 1.0,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            persist_optimizer: false,
            decoupled: true,
            freeze_b: false,
            batch_clip: None,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self, n_items: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.buffer_lr.is_finite() && self.buffer_lr >= 0.0) {
            return bad(format!("learning rates must be finite and non-negative (lr {}, buffer_lr {})", self.lr, self.buffer_lr));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std must be finite and non-negative, got {}", self.init_std));
        }
        if self.variant == Variant::Clr && (self.rank == 0 || self.rank > n_items.min(self.dim)) {
            return bad(format!("rank {} must be in 1..={}", self.rank, n_items.min(self.dim)));
        }
        if let Some(c) = self.batch_clip {
            if !(c > 0.0) {
                return bad(format!("batch_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Whether this configuration runs the two-step (frozen-p, then frozen-Q) procedure.
    pub fn two_step(&self) -> bool {
        self.decoupled && matches!(self.variant, Variant::Cf | Variant::Clr)
    }
}

/// The per-client personalization buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    None,
    Full(FullBuffer),
    LowRank(LowRankBuffer),
}

impl Buffer {
    pub fn view(&self) -> BufferView<'_> {
        match self {
            Buffer::None => BufferView::None,
            Buffer::Full(f) => BufferView::Full(&f.w),
            Buffer::LowRank(l) => BufferView::LowRank { a: &l.a, b: &l.b },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Buffer::None => 0,
            Buffer::Full(f) => f.param_count(),
            Buffer::LowRank(l) => l.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DenseOpt {
    Adam(AdamState),
    Sgd,
}

impl DenseOpt {
    fn new(kind: OptimizerKind, len: usize, cfg: AdamConfig) -> DenseOpt {
        match kind {
            OptimizerKind::Adam => DenseOpt::Adam(AdamState::new(len, cfg)),
            OptimizerKind::Sgd => DenseOpt::Sgd,
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        match self {
            DenseOpt::Adam(s) => s.step(param, grad, lr),
            DenseOpt::Sgd => {
                if param.len() != grad.len() {
                    return Err(Error::shape(param.len(), grad.len()));
                }
                param.iter_mut().zip(grad).for_each(|(x, g)| *x -= lr * g);
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum RowOpt {
    Adam(RowAdam),
    Sgd,
}

impl RowOpt {
    fn new(kind: OptimizerKind, rows: usize, cols: usize, cfg: AdamConfig) -> RowOpt {
        match kind {
            OptimizerKind::Adam => RowOpt::Adam(RowAdam::new(rows, cols, cfg)),
            OptimizerKind::Sgd => RowOpt::Sgd,
        }
    }

    fn step(&mut self, param: &mut Matrix, grads: &RowGrads, lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        match self {
            RowOpt::Adam(s) => s.step(param.as_mut_slice(), &grads.rows, grads.values.as_slice(), lr),
            RowOpt::Sgd => {
                for (k, &r) in grads.rows.iter().enumerate() {
                    for (x, g) in param.row_mut(r).iter_mut().zip(grads.values.row(k)) {
                        *x -= lr * g;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Optimizer state for the parameters that live on the client across rounds.
#[derive(Debug, Clone, PartialEq)]
struct PersonalMoments {
    user: DenseOpt,
    /// Rows of A or W.
    rows: RowOpt,
    b: DenseOpt,
}

/// Which parameters a local pass trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pass {
    /// p and Q jointly.
    Joint,
    /// Q only, p frozen.
    Items,
    /// p and the buffer, Q frozen.
    Personal,
    /// Buffer only, p and Q frozen.
    BufferOnly,
}

/// Key separating the negative draws of the two local passes in a round.
const STAGE_ITEMS: u64 = 1;
const STAGE_PERSONAL: u64 = 2;

/// Shared read-only inputs for one round of local work.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub dataset: &'a ImplicitDataset,
    pub sampler: &'a NegativeSampler,
    pub config: &'a ClientConfig,
    pub seed: u64,
    pub round: usize,
}

/// Result of the upload-producing part of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Q_u as trained locally, before any personalization.
    pub upload: Matrix,
    pub loss: f64,
}

/// A client's persistent state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub user: usize,
    pub p: Vec<f64>,
    /// Local item matrix Q_u from the client's latest item training.
    pub q: Matrix,
    pub buffer: Buffer,
    /// |D_u|.
    pub weight: f64,
    /// Last round in which the client trained, if any.
    pub last_round: Option<usize>,
    items_done_round: Option<usize>,
    moments: Option<PersonalMoments>,
}

impl ClientState {
    /// Fresh client: p ~ N(0, init_std²), Q_u = the initial global matrix, buffer per variant.
    pub fn new(user: usize, weight: f64, q_global: &Matrix, config: &ClientConfig, seed: u64) -> Result<ClientState> {
        let (m, d) = q_global.shape();
        if d != config.dim {
            return Err(Error::shape(format!("item dimension {}", config.dim), d));
        }
        let mut rng = stream(seed, Purpose::ClientInit, &[user as u64]);
        let p = Matrix::random_normal(1, d, config.init_std, &mut rng).into_vec();
        let buffer = match config.variant {
            Variant::FedMf => Buffer::None,
            Variant::Af | Variant::Cf => Buffer::Full(FullBuffer::new(m, d)),
            Variant::Clr => {
                let mut rng = stream(seed, Purpose::ClientInit, &[user as u64, 1]);
                Buffer::LowRank(LowRankBuffer::new(m, d, config.rank, &mut rng)?)
            }
        };
        Ok(ClientState {
            user,
            p,
            q: q_global.clone(),
            buffer,
            weight,
            last_round: None,
            items_done_round: None,
            moments: None,
        })
    }

    /// Rebuild a client from stored tensors.
    pub fn from_parts(user: usize, weight: f64, p: Vec<f64>, q: Matrix, buffer: Buffer, last_round: Option<usize>) -> ClientState {
        ClientState {
            user,
            p,
            q,
            buffer,
            weight,
            last_round,
            items_done_round: None,
            moments: None,
        }
    }

    /// The first half of a round: produces the matrix to upload.
    ///
    /// CF/CLR: Q_u ← Q_g_prev, trained with p frozen. FedMF/AF (and
    /// non-decoupled CF/CLR): p and Q_u trained jointly.
    pub fn local_update(&mut self, q_global_prev: &Matrix, ctx: &RoundContext<'_>) -> Result<LocalUpdate> {
        let cfg = ctx.config;
        q_global_prev.ensure_shape(self.q.rows(), self.q.cols())?;
        let pass = if cfg.two_step() { Pass::Items } else { Pass::Joint };
        let mut q = q_global_prev.clone();
        let loss = self.train(pass, &mut q, cfg.item_epochs, STAGE_ITEMS, ctx)?;
        self.q = q;
        self.items_done_round = Some(ctx.round);
        self.last_round = Some(ctx.round);
        Ok(LocalUpdate {
            upload: self.q.clone(),
            loss,
        })
    }

    /// The second half of a round: personalization against the frozen Q_u.
    /// A no-op for FedMF and for non-decoupled runs.
    pub fn personalize(&mut self, ctx: &RoundContext<'_>) -> Result<f64> {
        if self.items_done_round != Some(ctx.round) {
            return Err(Error::Client {
                client: self.user,
                message: format!("personalization requested before local update in round {}", ctx.round),
            });
        }
        self.items_done_round = None;
        let cfg = ctx.config;
        let pass = match cfg.variant {
            Variant::FedMf => return Ok(0.0),
            _ if !cfg.decoupled => return Ok(0.0),
            Variant::Af => Pass::BufferOnly,
            Variant::Cf | Variant::Clr => Pass::Personal,
        };
        let mut q = std::mem::replace(&mut self.q, Matrix::zeros(0, 0));
        let out = self.train(pass, &mut q, cfg.personal_epochs, STAGE_PERSONAL, ctx);
        self.q = q;
        out
    }

    /// Local update followed by personalization.
    pub fn run_round(&mut self, q_global_prev: &Matrix, ctx: &RoundContext<'_>) -> Result<LocalUpdate> {
        let up = self.local_update(q_global_prev, ctx)?;
        self.personalize(ctx)?;
        Ok(up)
    }

    fn moments(&mut self, cfg: &ClientConfig, m: usize, d: usize) -> PersonalMoments {
        if cfg.persist_optimizer {
            if let Some(m) = self.moments.take() {
                return m;
            }
        }
        let (rows, cols) = match &self.buffer {
            Buffer::LowRank(l) => (m, l.rank()),
            _ => (m, d),
        };
        PersonalMoments {
            user: DenseOpt::new(cfg.optimizer, d, cfg.adam),
            rows: RowOpt::new(cfg.optimizer, rows, cols, cfg.adam),
            b: DenseOpt::new(cfg.optimizer, cfg.rank * d, cfg.adam),
        }
    }

    /// Run `epochs` passes of mini-batch training. `q` is the item matrix
    /// being trained (or read, for passes that freeze it). Returns the mean
    /// batch loss of the last epoch.
    fn train(&mut self, pass: Pass, q: &mut Matrix, epochs: usize, stage: u64, ctx: &RoundContext<'_>) -> Result<f64> {
        let cfg = ctx.config;
        if epochs == 0 {
            return Ok(0.0);
        }
        let positives = ctx
            .dataset
            .train_positives
            .get(self.user)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown user {}", self.user)))?;
        if positives.is_empty() {
            return Err(Error::Client {
                client: self.user,
                message: "empty training set".into(),
            });
        }
        let negatives = ctx.sampler.train_negatives(self.user, cfg.train_negatives, ctx.round, stage)?;
        let mut examples: Vec<(usize, f64)> = positives.iter().map(|&i| (i, 1.0)).chain(negatives.into_iter().map(|i| (i, 0.0))).collect();

        let (m, d) = q.shape();
        let item_opt_needed = matches!(pass, Pass::Joint | Pass::Items);
        let mut item_opt = item_opt_needed.then(|| RowOpt::new(cfg.optimizer, m, d, cfg.adam));
        let mut moments = self.moments(cfg, m, d);
        // Joint passes train p with a fresh optimizer each round, like Q.
        let mut joint_user_opt = (pass == Pass::Joint).then(|| DenseOpt::new(cfg.optimizer, d, cfg.adam));

        let wants = match pass {
            Pass::Joint => Wants {
                user: true,
                items: true,
                lowrank: false,
            },
            Pass::Items => Wants {
                items: true,
                ..Wants::default()
            },
            Pass::Personal => Wants {
                user: true,
                items: matches!(self.buffer, Buffer::Full(_)),
                lowrank: matches!(self.buffer, Buffer::LowRank(_)),
            },
            Pass::BufferOnly => Wants {
                items: true,
                ..Wants::default()
            },
        };

        let mut last_loss = 0.0;
        for epoch in 0..epochs {
            let mut rng = stream(ctx.seed, Purpose::Shuffle, &[self.user as u64, ctx.round as u64, stage, epoch as u64]);
            examples.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut n_batches = 0usize;
            for batch in examples.chunks(cfg.batch_size) {
                let view = match pass {
                    Pass::Joint | Pass::Items => BufferView::None,
                    Pass::Personal | Pass::BufferOnly => self.buffer.view(),
                };
                let mut g = batch_gradient(&self.p, q, view, batch, wants);
                g.mean(batch.len());
                loss_sum += g.loss;
                n_batches += 1;
                match pass {
                    Pass::Joint | Pass::Items => {
                        if let Some(c) = cfg.batch_clip {
                            clip_rows(&mut g.items, c);
                        }
                        if let Some(opt) = joint_user_opt.as_mut() {
                            opt.step(&mut self.p, &g.user, cfg.lr)?;
                        }
                        item_opt.as_mut().expect("item optimizer").step(q, &g.items, cfg.lr)?;
                    }
                    Pass::Personal | Pass::BufferOnly => {
                        if pass == Pass::Personal {
                            moments.user.step(&mut self.p, &g.user, cfg.lr)?;
                        }
                        match &mut self.buffer {
                            Buffer::Full(f) => moments.rows.step(&mut f.w, &g.items, cfg.buffer_lr)?,
                            Buffer::LowRank(l) => {
                                moments.rows.step(&mut l.a, &g.a_rows, cfg.buffer_lr)?;
                                if !cfg.freeze_b {
                                    moments.b.step(l.b.as_mut_slice(), g.b.as_slice(), cfg.buffer_lr)?;
                                }
                            }
                            Buffer::None => {}
                        }
                    }
                }
            }
            last_loss = loss_sum / n_batches.max(1) as f64;
            if !last_loss.is_finite() {
                return Err(Error::Client {
                    client: self.user,
                    message: format!("non-finite loss in epoch {epoch}"),
                });
            }
        }
        if cfg.persist_optimizer {
            self.moments = Some(moments);
        }
        Ok(last_loss)
    }

    /// Logit p_uᵀ(q_i + buffer_i) for each candidate. With `merged = false`
    /// the buffer is ignored.
    pub fn logits(&self, items: &[usize], merged: bool) -> Vec<f64> {
        let view = if merged { self.buffer.view() } else { BufferView::None };
        let mut q_eff = vec![0.0; self.q.cols()];
        items
            .iter()
            .map(|&i| {
                effective_row(&self.q, view, i, &mut q_eff);
                dot(&self.p, &q_eff)
            })
            .collect()
    }

    /// σ(p_uᵀ(q_i + buffer_i)) per candidate.
    pub fn scores(&self, items: &[usize]) -> Vec<f64> {
        self.logits(items, true).into_iter().map(sigmoid).collect()
    }
}

fn clip_rows(g: &mut RowGrads, c: f64) {
    let norm = g.values.frobenius_norm();
    if norm > c {
        g.scale(c / norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IdMap;
    use crate::embedding::{bce_loss, merge};

    fn toy(m: usize, train: Vec<Vec<usize>>, test: Vec<usize>) -> ImplicitDataset {
        let users = IdMap::from_ordered((0..train.len()).map(|u| u.to_string()).collect());
        let items = IdMap::from_ordered((0..m).map(|i| i.to_string()).collect());
        ImplicitDataset::new(users, items, train, test).unwrap()
    }

    fn setup(variant: Variant) -> (ImplicitDataset, NegativeSampler, ClientConfig, Matrix) {
        let ds = toy(12, vec![vec![0, 1, 2, 3], vec![4, 5, 6]], vec![7, 8]);
        let sampler = NegativeSampler::new(&ds, 5);
        let cfg = ClientConfig {
            variant,
            dim: 4,
            rank: 2,
            item_epochs: 3,
            personal_epochs: 3,
            batch_size: 4,
            init_std: 0.1,
            ..ClientConfig::default()
        };
        let mut rng = stream(5, Purpose::GlobalInit, &[]);
        let qg = Matrix::random_normal(12, 4, 0.1, &mut rng);
        (ds, sampler, cfg, qg)
    }

    fn ctx<'a>(ds: &'a ImplicitDataset, s: &'a NegativeSampler, cfg: &'a ClientConfig, round: usize) -> RoundContext<'a> {
        RoundContext {
            dataset: ds,
            sampler: s,
            config: cfg,
            seed: 5,
            round,
        }
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("lora".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_epochs_upload_equals_download() {
        let (ds, s, mut cfg, qg) = setup(Variant::Clr);
        cfg.item_epochs = 0;
        let mut c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        let up = c.local_update(&qg, &ctx(&ds, &s, &cfg, 1)).unwrap();
        assert_eq!(up.upload, qg);
    }

    #[test]
    fn item_step_touches_only_batch_rows() {
        let (ds, s, mut cfg, qg) = setup(Variant::Clr);
        cfg.item_epochs = 1;
        cfg.train_negatives = 1;
        cfg.batch_size = 1024;
        let mut c = ClientState::new(1, 3.0, &qg, &cfg, 5).unwrap();
        let negatives = s.train_negatives(1, 1, 1, STAGE_ITEMS).unwrap();
        let up = c.local_update(&qg, &ctx(&ds, &s, &cfg, 1)).unwrap();
        for i in 0..12 {
            let touched = ds.train_positives[1].contains(&i) || negatives.contains(&i);
            assert_eq!(up.upload.row(i) != qg.row(i), touched, "row {i}");
        }
    }

    #[test]
    fn decoupling_freezes_the_other_half() {
        for variant in [Variant::Cf, Variant::Clr] {
            let (ds, s, cfg, qg) = setup(variant);
            let mut c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
            let cx = ctx(&ds, &s, &cfg, 1);
            let (p0, buf0) = (c.p.clone(), c.buffer.clone());
            c.local_update(&qg, &cx).unwrap();
            assert_eq!(c.p, p0);
            assert_eq!(c.buffer, buf0);
            let q1 = c.q.clone();
            c.personalize(&cx).unwrap();
            assert_eq!(c.q, q1);
            assert_ne!(c.p, p0);
            assert_ne!(c.buffer, buf0);
        }
    }

    #[test]
    fn personalize_before_local_update_is_an_error() {
        let (ds, s, cfg, qg) = setup(Variant::Clr);
        let mut c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        assert!(c.personalize(&ctx(&ds, &s, &cfg, 1)).is_err());
        c.local_update(&qg, &ctx(&ds, &s, &cfg, 1)).unwrap();
        assert!(c.personalize(&ctx(&ds, &s, &cfg, 2)).is_err());
    }

    #[test]
    fn zero_buffer_lr_leaves_buffer_unchanged() {
        let (ds, s, mut cfg, qg) = setup(Variant::Clr);
        cfg.buffer_lr = 0.0;
        let mut c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        let (p0, buf0) = (c.p.clone(), c.buffer.clone());
        c.run_round(&qg, &ctx(&ds, &s, &cfg, 1)).unwrap();
        assert_eq!(c.buffer, buf0);
        assert_ne!(c.p, p0);
    }

    #[test]
    fn upload_ignores_buffer_state() {
        let (ds, s, cfg, qg) = setup(Variant::Clr);
        let mut a = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        let mut b = a.clone();
        if let Buffer::LowRank(l) = &mut b.buffer {
            l.a.as_mut_slice().iter_mut().for_each(|x| *x = 3.0);
            l.b.as_mut_slice().iter_mut().for_each(|x| *x = -1.0);
        }
        let cx = ctx(&ds, &s, &cfg, 1);
        assert_eq!(a.run_round(&qg, &cx).unwrap(), b.run_round(&qg, &cx).unwrap());
    }

    #[test]
    fn zero_a_scores_match_unmerged() {
        let (_, _, cfg, qg) = setup(Variant::Clr);
        let c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        let items: Vec<usize> = (0..12).collect();
        assert_eq!(c.logits(&items, true), c.logits(&items, false));
    }

    #[test]
    fn zero_init_scores_are_one_half() {
        let (_, _, mut cfg, _) = setup(Variant::FedMf);
        cfg.init_std = 0.0;
        let c = ClientState::new(0, 4.0, &Matrix::zeros(12, 4), &cfg, 5).unwrap();
        assert!(c.scores(&[0, 3, 11]).iter().all(|&s| s == 0.5));
    }

    #[test]
    fn item_loss_decreases_on_a_fixed_batch() {
        let (ds, s, mut cfg, qg) = setup(Variant::Clr);
        cfg.lr = 1e-3;
        cfg.batch_size = 1024;
        cfg.item_epochs = 1;
        let mut c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        c.p = vec![0.5, -0.3, 0.2, 0.4];
        let negatives = s.train_negatives(0, cfg.train_negatives, 1, STAGE_ITEMS).unwrap();
        let batch: Vec<(usize, f64)> = ds.train_positives[0].iter().map(|&i| (i, 1.0)).chain(negatives.iter().map(|&i| (i, 0.0))).collect();
        let loss = |q: &Matrix| {
            let pairs: Vec<(f64, f64)> = batch.iter().map(|&(i, r)| (sigmoid(dot(&c.p, q.row(i))), r)).collect();
            bce_loss(&pairs)
        };
        let mut q = qg.clone();
        let mut prev = loss(&q);
        for round in 0..20 {
            // same round key keeps the negatives fixed
            let mut cc = c.clone();
            cc.q = q.clone();
            let up = cc.local_update(&q, &ctx(&ds, &s, &cfg, 1)).unwrap();
            q = up.upload;
            let now = loss(&q);
            assert!(now <= prev + 1e-12, "epoch {round}: {now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn nondecoupled_clr_reproduces_fedmf() {
        let (ds, s, cfg_mf, qg) = setup(Variant::FedMf);
        let cfg_clr = ClientConfig {
            variant: Variant::Clr,
            decoupled: false,
            ..cfg_mf.clone()
        };
        let mut mf = ClientState::new(0, 4.0, &qg, &cfg_mf, 5).unwrap();
        let mut clr = ClientState::new(0, 4.0, &qg, &cfg_clr, 5).unwrap();
        let mut q = qg.clone();
        for round in 1..4 {
            let a = mf.run_round(&q, &ctx(&ds, &s, &cfg_mf, round)).unwrap();
            let b = clr.run_round(&q, &ctx(&ds, &s, &cfg_clr, round)).unwrap();
            assert_eq!(a, b);
            assert_eq!(mf.p, clr.p);
            q = a.upload;
        }
        let items: Vec<usize> = (0..12).collect();
        assert_eq!(mf.scores(&items), clr.scores(&items));
    }

    #[test]
    fn cf_equals_clr_with_identity_b() {
        let (ds, s, mut cfg_cf, qg) = setup(Variant::Cf);
        cfg_cf.rank = 4;
        let cfg_clr = ClientConfig {
            variant: Variant::Clr,
            freeze_b: true,
            ..cfg_cf.clone()
        };
        let mut cf = ClientState::new(0, 4.0, &qg, &cfg_cf, 5).unwrap();
        let mut clr = ClientState::new(0, 4.0, &qg, &cfg_clr, 5).unwrap();
        clr.buffer = Buffer::LowRank(LowRankBuffer::from_parts(Matrix::zeros(12, 4), Matrix::identity(4)).unwrap());
        let mut q = qg.clone();
        for round in 1..4 {
            let a = cf.run_round(&q, &ctx(&ds, &s, &cfg_cf, round)).unwrap();
            let b = clr.run_round(&q, &ctx(&ds, &s, &cfg_clr, round)).unwrap();
            assert_eq!(a, b);
            assert_eq!(cf.p, clr.p);
            let (Buffer::Full(f), Buffer::LowRank(l)) = (&cf.buffer, &clr.buffer) else {
                unreachable!()
            };
            assert_eq!(f.w, l.a);
            assert_eq!(merge(&cf.q, &l.a, &l.b).unwrap(), cf.q.add(&f.w).unwrap());
            q = a.upload;
        }
    }

    #[test]
    fn af_uploads_before_fine_tuning() {
        let (ds, s, cfg, qg) = setup(Variant::Af);
        let mut c = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        let cx = ctx(&ds, &s, &cfg, 1);
        let up = c.local_update(&qg, &cx).unwrap();
        let p_after_joint = c.p.clone();
        c.personalize(&cx).unwrap();
        assert_eq!(up.upload, c.q);
        assert_eq!(c.p, p_after_joint);
        let Buffer::Full(f) = &c.buffer else { unreachable!() };
        assert!(f.w.as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn persisted_moments_change_trajectory() {
        let (ds, s, cfg, qg) = setup(Variant::Clr);
        let cfg_p = ClientConfig {
            persist_optimizer: true,
            ..cfg.clone()
        };
        let mut a = ClientState::new(0, 4.0, &qg, &cfg, 5).unwrap();
        let mut b = ClientState::new(0, 4.0, &qg, &cfg_p, 5).unwrap();
        a.run_round(&qg, &ctx(&ds, &s, &cfg, 1)).unwrap();
        b.run_round(&qg, &ctx(&ds, &s, &cfg_p, 1)).unwrap();
        assert_eq!(a.p, b.p);
        a.run_round(&qg, &ctx(&ds, &s, &cfg, 2)).unwrap();
        b.run_round(&qg, &ctx(&ds, &s, &cfg_p, 2)).unwrap();
        assert_ne!(a.p, b.p);
    }
}
