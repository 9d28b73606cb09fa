//! Closed-form BCE gradients.
//!
//! With r̂ = σ(pᵀq_eff) and residual e = r̂ − r, the summed loss has
//! ∂/∂p = Σ e·q_eff, ∂/∂q_i = ∂/∂w_i = e·p, and for a low-rank buffer
//! W = A·B: ∂/∂A_i = e·(B p), ∂/∂B = Σ e·A_iᵀ pᵀ.

use super::math::{bce_loss, dot, sigmoid};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Gradient rows for the subset of items touched by a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrads {
    /// Touched row indices, in order of first appearance in the batch.
    pub rows: Vec<usize>,
    /// One gradient row per entry of `rows`.
    pub values: Matrix,
}

impl RowGrads {
    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.iter().position(|&r| r == row).map(|k| self.values.row(k))
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.scale(factor);
    }

    /// Expand to a dense `n_rows × cols` matrix.
    pub fn to_dense(&self, n_rows: usize) -> Matrix {
        let mut out = Matrix::zeros(n_rows, self.values.cols());
        for (k, &r) in self.rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.values.row(k));
        }
        out
    }
}

struct RowAccumulator {
    cols: usize,
    /// Position of each matrix row in `rows`, or `EMPTY`.
    slot: Vec<usize>,
    rows: Vec<usize>,
    data: Vec<f64>,
}

const EMPTY: usize = usize::MAX;

impl RowAccumulator {
    fn new(cols: usize, n_rows: usize) -> Self {
        RowAccumulator {
            cols,
            slot: vec![EMPTY; n_rows],
            rows: Vec::new(),
            data: Vec::new(),
        }
    }

    fn add_scaled(&mut self, row: usize, scale: f64, v: &[f64]) {
        let mut k = self.slot[row];
        if k == EMPTY {
            k = self.rows.len();
            self.slot[row] = k;
            self.rows.push(row);
            self.data.resize(self.data.len() + self.cols, 0.0);
        }
        let dst = &mut self.data[k * self.cols..(k + 1) * self.cols];
        for (d, x) in dst.iter_mut().zip(v) {
            *d += scale * x;
        }
    }

    fn finish(self) -> RowGrads {
        let n = self.rows.len();
        RowGrads {
            rows: self.rows,
            values: Matrix::from_vec(n, self.cols, self.data).expect("consistent accumulator"),
        }
    }
}

/// How item vectors are formed from the frozen or trainable base `Q`.
#[derive(Debug, Clone, Copy)]
pub enum BufferView<'a> {
    None,
    /// q_eff = q_i + w_i
    Full(&'a Matrix),
    /// q_eff = q_i + (A·B)_i
    LowRank { a: &'a Matrix, b: &'a Matrix },
}

/// Write q_i + buffer_i into `out`.
pub fn effective_row(q: &Matrix, buffer: BufferView<'_>, item: usize, out: &mut [f64]) {
    let base = q.row(item);
    match buffer {
        BufferView::None => out.copy_from_slice(base),
        BufferView::Full(w) => {
            for ((o, &x), &y) in out.iter_mut().zip(base).zip(w.row(item)) {
                *o = x + y;
            }
        }
        BufferView::LowRank { a, b } => {
            let a_row = a.row(item);
            for (j, (o, &x)) in out.iter_mut().zip(base).enumerate() {
                let mut acc = 0.0;
                for (k, &ak) in a_row.iter().enumerate() {
                    acc += ak * b.get(k, j);
                }
                *o = x + acc;
            }
        }
    }
}

/// Which parameter families a batch gradient should produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Wants {
    pub user: bool,
    /// Rows of `Q` (identical to rows of a full buffer `W`).
    pub items: bool,
    pub lowrank: bool,
}

/// Summed loss and gradients over one batch of `(item, label)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    pub user: Vec<f64>,
    pub items: RowGrads,
    pub a_rows: RowGrads,
    pub b: Matrix,
}

impl BatchGrad {
    /// Convert summed gradients into batch-mean gradients.
    pub fn mean(&mut self, n: usize) {
        let f = 1.0 / n as f64;
        self.user.iter_mut().for_each(|v| *v *= f);
        self.items.scale(f);
        self.a_rows.scale(f);
        self.b.scale(f);
        self.loss *= f;
    }
}

pub fn batch_gradient(p: &[f64], q: &Matrix, buffer: BufferView<'_>, batch: &[(usize, f64)], wants: Wants) -> BatchGrad {
    let d = q.cols();
    let mut user = vec![0.0; d];
    let mut items = RowAccumulator::new(d, if wants.items { q.rows() } else { 0 });
    let (rank, mut b_grad, bp) = match buffer {
        BufferView::LowRank { a, b } if wants.lowrank => {
            // B p, shared by every dA row in the batch
            let bp: Vec<f64> = (0..b.rows()).map(|k| dot(b.row(k), p)).collect();
            (a.cols(), Matrix::zeros(b.rows(), d), bp)
        }
        _ => (0, Matrix::zeros(0, d), Vec::new()),
    };
    let mut a_rows = RowAccumulator::new(rank, if rank > 0 { q.rows() } else { 0 });
    let mut q_eff = vec![0.0; d];
    let mut preds = Vec::with_capacity(batch.len());
    for &(item, label) in batch {
        effective_row(q, buffer, item, &mut q_eff);
        let pred = sigmoid(dot(p, &q_eff));
        preds.push((pred, label));
        let e = pred - label;
        if wants.user {
            for (g, &x) in user.iter_mut().zip(&q_eff) {
                *g += e * x;
            }
        }
        if wants.items {
            items.add_scaled(item, e, p);
        }
        if let (true, BufferView::LowRank { a, .. }) = (wants.lowrank, buffer) {
            a_rows.add_scaled(item, e, &bp);
            let a_row = a.row(item);
            for (k, &ak) in a_row.iter().enumerate() {
                if ak == 0.0 {
                    continue;
                }
                for (g, &pj) in b_grad.row_mut(k).iter_mut().zip(p) {
                    *g += e * ak * pj;
                }
            }
        }
    }
    BatchGrad {
        loss: bce_loss(&preds),
        user,
        items: items.finish(),
        a_rows: a_rows.finish(),
        b: b_grad,
    }
}

/// ∂L/∂p = Σ (σ(pᵀq_i) − r_i)·q_i over the given item vectors.
pub fn grad_user(p: &[f64], items: &[&[f64]], labels: &[f64]) -> Result<Vec<f64>> {
    if items.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", items.len()), labels.len()));
    }
    let mut g = vec![0.0; p.len()];
    for (q, &r) in items.iter().zip(labels) {
        if q.len() != p.len() {
            return Err(Error::shape(format!("dimension {}", p.len()), q.len()));
        }
        let e = sigmoid(dot(p, q)) - r;
        for (gi, &x) in g.iter_mut().zip(*q) {
            *gi += e * x;
        }
    }
    Ok(g)
}

/// ∂L/∂q_i = (σ(pᵀq_eff) − r)·p. Also the gradient of a full-buffer row w_i.
pub fn grad_item(p: &[f64], q_eff: &[f64], label: f64) -> Result<Vec<f64>> {
    if q_eff.len() != p.len() {
        return Err(Error::shape(format!("dimension {}", p.len()), q_eff.len()));
    }
    let e = sigmoid(dot(p, q_eff)) - label;
    Ok(p.iter().map(|&x| e * x).collect())
}

/// Full-buffer row gradient: [`grad_item`] evaluated at q_i + w_i.
pub fn grad_full_buffer(p: &[f64], q: &[f64], w: &[f64], label: f64) -> Result<Vec<f64>> {
    if q.len() != w.len() {
        return Err(Error::shape(format!("dimension {}", q.len()), w.len()));
    }
    let q_eff: Vec<f64> = q.iter().zip(w).map(|(a, b)| a + b).collect();
    grad_item(p, &q_eff, label)
}

/// Gradients of the summed batch loss with respect to the low-rank factors.
/// `dA` only has rows for items present in the batch.
pub fn grad_lowrank(p: &[f64], q: &Matrix, a: &Matrix, b: &Matrix, batch: &[(usize, f64)]) -> Result<(RowGrads, Matrix)> {
    let (m, d) = q.shape();
    let r = a.cols();
    if p.len() != d {
        return Err(Error::shape(format!("dimension {d}"), p.len()));
    }
    a.ensure_shape(m, r)?;
    b.ensure_shape(r, d)?;
    if let Some(&(bad, _)) = batch.iter().find(|(i, _)| *i >= m) {
        return Err(Error::InvalidArgument(format!("item {bad} out of range (m = {m})")));
    }
    let wants = Wants {
        lowrank: true,
        ..Wants::default()
    };
    let g = batch_gradient(p, q, BufferView::LowRank { a, b }, batch, wants);
    Ok((g.a_rows, g.b))
}
