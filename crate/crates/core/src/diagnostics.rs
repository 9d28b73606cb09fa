//! Analytical quantities for the user-embedding skew: its first-order
//! decomposition, the calibration a buffer step induces, the accumulated
//! bound, and user-embedding trajectories.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, grad_user, norm, sigmoid, sigmoid_prime, Matrix};
use crate::error::{Error, Result};

/// δ = Q_g − Q_u, row by row.
pub fn compute_delta(q_global: &Matrix, q_local: &Matrix) -> Result<Matrix> {
    q_global.sub(q_local)
}

/// The two first-order components of a gradient change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewTerms {
    /// Along the item embeddings.
    pub scaling: Vec<f64>,
    /// Along δ (skew) or p (calibration).
    pub shift: Vec<f64>,
}

impl SkewTerms {
    /// scaling + shift.
    pub fn total(&self) -> Vec<f64> {
        self.scaling.iter().zip(&self.shift).map(|(a, b)| a + b).collect()
    }
}

/// L1 = σ(pᵀq) − r, L2 = σ′(pᵀq).
pub fn residuals(p: &[f64], q: &[f64], label: f64) -> (f64, f64) {
    let x = dot(p, q);
    (sigmoid(x) - label, sigmoid_prime(x))
}

fn check_rows(p: &[f64], m: &Matrix, pairs: &[(usize, f64)]) -> Result<()> {
    if m.cols() != p.len() {
        return Err(Error::shape(format!("dimension {}", p.len()), m.cols()));
    }
    if let Some(&(i, _)) = pairs.iter().find(|(i, _)| *i >= m.rows()) {
        return Err(Error::InvalidArgument(format!("item {i} out of range")));
    }
    Ok(())
}

/// Σ_i L2·(pᵀδ_i)·q_i and Σ_i L1·δ_i over the given `(item, label)` pairs.
pub fn skew_terms(p: &[f64], q: &Matrix, delta: &Matrix, pairs: &[(usize, f64)]) -> Result<SkewTerms> {
    check_rows(p, q, pairs)?;
    delta.ensure_shape(q.rows(), q.cols())?;
    let d = p.len();
    let mut scaling = vec![0.0; d];
    let mut shift = vec![0.0; d];
    for &(i, r) in pairs {
        let (qi, di) = (q.row(i), delta.row(i));
        let (l1, l2) = residuals(p, qi, r);
        let c = l2 * dot(p, di);
        for j in 0..d {
            scaling[j] += c * qi[j];
            shift[j] += l1 * di[j];
        }
    }
    Ok(SkewTerms { scaling, shift })
}

/// −Σ_i η·L1·L2·(pᵀp)·q_i and −Σ_i η·L1²·p.
pub fn calibration_terms(p: &[f64], q: &Matrix, pairs: &[(usize, f64)], lr: f64) -> Result<SkewTerms> {
    check_rows(p, q, pairs)?;
    let d = p.len();
    let pp = dot(p, p);
    let mut scaling = vec![0.0; d];
    let mut l1_sq = 0.0;
    for &(i, r) in pairs {
        let qi = q.row(i);
        let (l1, l2) = residuals(p, qi, r);
        l1_sq += l1 * l1;
        let c = -lr * l1 * l2 * pp;
        for j in 0..d {
            scaling[j] += c * qi[j];
        }
    }
    let shift = p.iter().map(|&x| -lr * l1_sq * x).collect();
    Ok(SkewTerms { scaling, shift })
}

/// User gradient Σ (σ(pᵀq_i) − r_i)·q_i over rows of `q`.
pub fn user_gradient(p: &[f64], q: &Matrix, pairs: &[(usize, f64)]) -> Result<Vec<f64>> {
    check_rows(p, q, pairs)?;
    let rows: Vec<&[f64]> = pairs.iter().map(|&(i, _)| q.row(i)).collect();
    let labels: Vec<f64> = pairs.iter().map(|&(_, r)| r).collect();
    grad_user(p, &rows, &labels)
}

/// ‖[∇p(Q + δ) − ∇p(Q)] − (scaling + shift)‖, the second-order remainder.
pub fn taylor_residual(p: &[f64], q: &Matrix, delta: &Matrix, pairs: &[(usize, f64)]) -> Result<f64> {
    let shifted = q.add(delta)?;
    let exact: Vec<f64> = user_gradient(p, &shifted, pairs)?
        .iter()
        .zip(user_gradient(p, q, pairs)?)
        .map(|(a, b)| a - b)
        .collect();
    let approx = skew_terms(p, q, delta, pairs)?.total();
    Ok(norm(&exact.iter().zip(&approx).map(|(a, b)| a - b).collect::<Vec<_>>()))
}

/// Change in the user gradient after one plain gradient step of size `lr`
/// on a zero-initialized full buffer (w_i = −lr·L1_i·p).
pub fn calibration_probe(p: &[f64], q: &Matrix, pairs: &[(usize, f64)], lr: f64) -> Result<Vec<f64>> {
    check_rows(p, q, pairs)?;
    let mut w = Matrix::zeros(q.rows(), q.cols());
    for &(i, r) in pairs {
        let (l1, _) = residuals(p, q.row(i), r);
        for (wj, &pj) in w.row_mut(i).iter_mut().zip(p) {
            *wj -= lr * l1 * pj;
        }
    }
    let after = user_gradient(p, &q.add(&w)?, pairs)?;
    let before = user_gradient(p, q, pairs)?;
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// Per-item inputs to the accumulated bound, taken at round 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    /// ‖δ_i⁰‖
    pub delta_norm: f64,
    /// |p⁰ᵀδ_i⁰|
    pub p_dot_delta: f64,
    /// ‖q_i⁰‖
    pub q_norm: f64,
}

pub fn bound_terms(p0: &[f64], q0: &Matrix, delta0: &Matrix, items: &[usize]) -> Vec<BoundTerm> {
    items
        .iter()
        .map(|&i| BoundTerm {
            delta_norm: norm(delta0.row(i)),
            p_dot_delta: dot(p0, delta0.row(i)).abs(),
            q_norm: norm(q0.row(i)),
        })
        .collect()
}

/// Σ_i [η·C1·‖δ_i⁰‖ + η·C2·|p⁰ᵀδ_i⁰|·‖q_i⁰‖] / (1 − γ).
pub fn accumulated_bound(terms: &[BoundTerm], lr: f64, gamma: f64, c1: f64, c2: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let s: f64 = terms
        .iter()
        .map(|t| lr * c1 * t.delta_norm + lr * c2 * t.p_dot_delta * t.q_norm)
        .sum();
    Ok(s / (1.0 - gamma))
}

/// C1 = max |L1| and C2 = max L2 over the given pairs.
pub fn residual_bounds(p: &[f64], q: &Matrix, pairs: &[(usize, f64)]) -> (f64, f64) {
    pairs.iter().fold((0.0, 0.0), |(c1, c2), &(i, r)| {
        let (l1, l2) = residuals(p, q.row(i), r);
        (f64::max(c1, l1.abs()), f64::max(c2, l2))
    })
}

/// ‖Σ_t η·(scaling_t + shift_t)‖ for a sequence of δ matrices at fixed (p, Q).
pub fn cumulative_skew(p: &[f64], q: &Matrix, deltas: &[Matrix], pairs: &[(usize, f64)], lr: f64) -> Result<f64> {
    let mut acc = vec![0.0; p.len()];
    for delta in deltas {
        for (a, t) in acc.iter_mut().zip(skew_terms(p, q, delta, pairs)?.total()) {
            *a += lr * t;
        }
    }
    Ok(norm(&acc))
}

/// Largest observed ‖δ^{t+1}‖ / ‖δ^t‖.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// γ ≥ 1 or an unbounded ratio was observed.
    pub out_of_assumption: bool,
    /// No defined ratio (all-zero history).
    pub degenerate: bool,
}

/// Max successive ratio over one norm history. Needs at least two entries.
pub fn estimate_gamma(history: &[f64]) -> Result<GammaEstimate> {
    estimate_gamma_items(std::slice::from_ref(&history.to_vec()))
}

/// Max successive ratio over several per-item histories.
pub fn estimate_gamma_items(histories: &[Vec<f64>]) -> Result<GammaEstimate> {
    if histories.iter().all(|h| h.len() < 2) {
        return Err(Error::InvalidArgument("gamma needs at least two rounds of history".into()));
    }
    let mut gamma: Option<f64> = None;
    let mut unbounded = false;
    for h in histories {
        for w in h.windows(2) {
            if w[0] > 0.0 {
                let r = w[1] / w[0];
                gamma = Some(gamma.map_or(r, |g| g.max(r)));
            } else if w[1] > 0.0 {
                unbounded = true;
            }
        }
    }
    Ok(match gamma {
        Some(g) => GammaEstimate {
            gamma: g,
            out_of_assumption: g >= 1.0 || unbounded,
            degenerate: false,
        },
        None => GammaEstimate {
            gamma: 0.0,
            out_of_assumption: unbounded,
            degenerate: true,
        },
    })
}

/// One diagnostic record for one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub round: usize,
    pub client: usize,
    pub items: Vec<usize>,
    /// ‖δ_i‖ for each tracked item.
    pub delta_norms: Vec<f64>,
    pub scaling: Vec<f64>,
    pub shift: Vec<f64>,
    /// scaling + shift.
    pub total: Vec<f64>,
    pub calibration_scaling: Vec<f64>,
    pub calibration_shift: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub gamma: Option<GammaEstimate>,
    /// Bound computed from this client's first report.
    pub bound: Option<f64>,
    /// ‖Σ η·total‖ over this client's reports so far.
    pub measured_cumulative: f64,
    /// `bound` is meaningful (γ estimate inside (0, 1)) and not exceeded.
    pub bound_holds: Option<bool>,
}

impl SkewReport {
    /// Compute the per-round terms for one client. `pairs` are the client's
    /// labelled items restricted to the tracked subset.
    pub fn compute(
        round: usize,
        client: usize,
        p: &[f64],
        q_local: &Matrix,
        q_global: &Matrix,
        pairs: &[(usize, f64)],
        lr: f64,
    ) -> Result<SkewReport> {
        let delta = compute_delta(q_global, q_local)?;
        let terms = skew_terms(p, q_local, &delta, pairs)?;
        let cal = calibration_terms(p, q_local, pairs, lr)?;
        let (c1, c2) = residual_bounds(p, q_local, pairs);
        Ok(SkewReport {
            round,
            client,
            items: pairs.iter().map(|&(i, _)| i).collect(),
            delta_norms: pairs.iter().map(|&(i, _)| norm(delta.row(i))).collect(),
            total: terms.total(),
            scaling: terms.scaling,
            shift: terms.shift,
            calibration_scaling: cal.scaling,
            calibration_shift: cal.shift,
            c1,
            c2,
            gamma: None,
            bound: None,
            measured_cumulative: 0.0,
            bound_holds: None,
        })
    }
}

/// Accumulates per-client skew reports across rounds and fills in the
/// running γ estimate, the accumulated bound and the measured cumulative skew.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkewTracker {
    clients: BTreeMap<usize, TrackerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrackerEntry {
    first: BoundInputs,
    norms: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
    c1: f64,
    c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoundInputs {
    terms: Vec<BoundTerm>,
}

impl SkewTracker {
    pub fn new() -> SkewTracker {
        SkewTracker::default()
    }

    /// Fold `report` into the client's history and complete its running fields.
    /// `p`, `q_local` and `delta` inputs for the bound are taken from the first
    /// report seen for each client.
    pub fn observe(&mut self, mut report: SkewReport, p: &[f64], q_local: &Matrix, q_global: &Matrix, lr: f64) -> Result<SkewReport> {
        let entry = match self.clients.get_mut(&report.client) {
            Some(e) => e,
            None => {
                let delta = compute_delta(q_global, q_local)?;
                let terms = bound_terms(p, q_local, &delta, &report.items);
                self.clients.entry(report.client).or_insert(TrackerEntry {
                    first: BoundInputs { terms },
                    norms: vec![Vec::new(); report.items.len()],
                    cumulative: vec![0.0; p.len()],
                    c1: 0.0,
                    c2: 0.0,
                })
            }
        };
        for (h, &n) in entry.norms.iter_mut().zip(&report.delta_norms) {
            h.push(n);
        }
        for (a, t) in entry.cumulative.iter_mut().zip(&report.total) {
            *a += lr * t;
        }
        entry.c1 = entry.c1.max(report.c1);
        entry.c2 = entry.c2.max(report.c2);
        report.measured_cumulative = norm(&entry.cumulative);
        if entry.norms.first().is_some_and(|h| h.len() >= 2) {
            let g = estimate_gamma_items(&entry.norms)?;
            report.gamma = Some(g);
            if g.gamma > 0.0 && g.gamma < 1.0 && !g.out_of_assumption {
                let b = accumulated_bound(&entry.first.terms, lr, g.gamma, entry.c1, entry.c2)?;
                report.bound = Some(b);
                report.bound_holds = Some(report.measured_cumulative <= b);
            } else {
                report.bound_holds = Some(false);
            }
        }
        Ok(report)
    }
}

/// Write reports as JSON lines.
pub fn write_reports<W: Write>(mut out: W, reports: &[SkewReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<skew reports>", e))?;
    }
    Ok(())
}

/// Per-client user-embedding snapshots over rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub dim: usize,
    pub entries: BTreeMap<usize, Vec<(usize, Vec<f64>)>>,
}

impl TrajectoryLog {
    pub fn new(dim: usize) -> TrajectoryLog {
        TrajectoryLog {
            dim,
            entries: BTreeMap::new(),
        }
    }

    /// Append a copy of `p` for `client` at `round`.
    pub fn record(&mut self, client: usize, round: usize, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::shape(format!("dimension {}", self.dim), p.len()));
        }
        let rows = self.entries.entry(client).or_default();
        if let Some(&(last, _)) = rows.last() {
            if round <= last {
                return Err(Error::InvalidArgument(format!(
                    "client {client}: trajectory round {round} not after {last}"
                )));
            }
        }
        rows.push((round, p.to_vec()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with header `client,round,p0,...`. Floats use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client".to_string(), "round".to_string()];
        header.extend((0..self.dim).map(|j| format!("p{j}")));
        w.write_record(&header)?;
        for (client, rows) in &self.entries {
            for (round, p) in rows {
                let mut rec = vec![client.to_string(), round.to_string()];
                rec.extend(p.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<trajectories>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<TrajectoryLog> {
        let mut r = csv::Reader::from_reader(input);
        let dim = r.headers()?.len().saturating_sub(2);
        let mut log = TrajectoryLog::new(dim);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |m: String| Error::Parse {
                path: "<trajectories>".into(),
                line: line + 2,
                message: m,
            };
            let fields: Vec<&str> = rec.iter().collect();
            if fields.len() != dim + 2 {
                return Err(parse_err(format!("expected {} fields, got {}", dim + 2, fields.len())));
            }
            let client = fields[0].parse().map_err(|e| parse_err(format!("client: {e}")))?;
            let round = fields[1].parse().map_err(|e| parse_err(format!("round: {e}")))?;
            let p = fields[2..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            log.record(client, round, &p)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;

    fn random_instance(seed: u64, m: usize, d: usize) -> (Vec<f64>, Matrix, Matrix, Vec<(usize, f64)>) {
        let mut rng = stream(seed, Purpose::GlobalInit, &[]);
        let p = Matrix::random_normal(1, d, 0.8, &mut rng).into_vec();
        let q = Matrix::random_normal(m, d, 0.8, &mut rng);
        let delta = Matrix::random_normal(m, d, 0.3, &mut rng);
        let pairs = (0..m).map(|i| (i, (i % 2) as f64)).collect();
        (p, q, delta, pairs)
    }

    #[test]
    fn identical_matrices_have_zero_delta() {
        let (_, q, _, _) = random_instance(1, 4, 3);
        let d = compute_delta(&q, &q).unwrap();
        assert!(d.as_slice().iter().all(|&x| x == 0.0));
        assert!(compute_delta(&q, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn two_client_delta() {
        // Q_g = w1·Q1 + w2·Q2 → δ1 = Q_g − Q1 = w2·(Q2 − Q1)
        let q1 = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let q2 = Matrix::from_vec(1, 2, vec![3.0, -2.0]).unwrap();
        let qg = crate::server::fedavg_weighted(&[(&q1, 0.25), (&q2, 0.75)]).unwrap();
        let d = compute_delta(&qg, &q1).unwrap();
        assert_relative_eq!(d.get(0, 0), 0.75 * 2.0);
        assert_relative_eq!(d.get(0, 1), 0.75 * -4.0);
    }

    #[test]
    fn skew_terms_degenerate_cases() {
        let (p, q, delta, pairs) = random_instance(2, 5, 3);
        let t = skew_terms(&p, &q, &Matrix::zeros(5, 3), &pairs).unwrap();
        assert!(t.scaling.iter().chain(&t.shift).all(|&x| x == 0.0));
        let zero_p = vec![0.0; 3];
        let t = skew_terms(&zero_p, &q, &delta, &pairs).unwrap();
        assert!(t.scaling.iter().all(|&x| x == 0.0));
        for j in 0..3 {
            let expected: f64 = pairs.iter().map(|&(i, r)| (0.5 - r) * delta.get(i, j)).sum();
            assert_relative_eq!(t.shift[j], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn taylor_residual_is_second_order() {
        let (p, q, delta, pairs) = random_instance(3, 6, 4);
        let mut prev = None;
        for k in 0..4 {
            let mut dk = delta.clone();
            dk.scale(0.5f64.powi(k));
            let r = taylor_residual(&p, &q, &dk, &pairs).unwrap();
            if let Some(pr) = prev {
                let ratio: f64 = pr / r;
                assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
            }
            prev = Some(r);
        }
    }

    #[test]
    fn calibration_terms_structure() {
        let (p, q, _, pairs) = random_instance(4, 5, 3);
        let t = calibration_terms(&vec![0.0; 3], &q, &pairs, 0.01).unwrap();
        assert!(t.scaling.iter().chain(&t.shift).all(|&x| x == 0.0));
        let t = calibration_terms(&p, &q, &pairs, 0.01).unwrap();
        let cos = dot(&t.shift, &p) / (norm(&t.shift) * norm(&p));
        assert_relative_eq!(cos, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn probe_matches_calibration_to_first_order() {
        let (p, q, _, pairs) = random_instance(5, 3, 4);
        let mut prev = None;
        for lr in [1e-2, 5e-3, 2.5e-3] {
            let measured = calibration_probe(&p, &q, &pairs, lr).unwrap();
            let predicted = calibration_terms(&p, &q, &pairs, lr).unwrap().total();
            let r = norm(&measured.iter().zip(&predicted).map(|(a, b)| a - b).collect::<Vec<_>>());
            if let Some(pr) = prev {
                let ratio: f64 = pr / r;
                assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
            }
            prev = Some(r);
        }
    }

    #[test]
    fn bound_formula() {
        let t = [BoundTerm {
            delta_norm: 1.0,
            p_dot_delta: 0.2,
            q_norm: 1.0,
        }];
        assert_relative_eq!(accumulated_bound(&t, 0.01, 0.5, 0.5, 0.25).unwrap(), 0.011, epsilon = 1e-15);
        let zero = [BoundTerm {
            delta_norm: 0.0,
            p_dot_delta: 0.0,
            q_norm: 1.0,
        }];
        assert_eq!(accumulated_bound(&zero, 0.01, 0.5, 0.5, 0.25).unwrap(), 0.0);
        let lo = accumulated_bound(&t, 0.01, 0.9, 0.5, 0.25).unwrap();
        let hi = accumulated_bound(&t, 0.01, 0.999, 0.5, 0.25).unwrap();
        assert!(hi > lo);
        assert!(accumulated_bound(&t, 0.01, 1.0, 0.5, 0.25).is_err());
        assert!(accumulated_bound(&t, 0.01, 0.0, 0.5, 0.25).is_err());
    }

    #[test]
    fn gamma_estimates() {
        let g = estimate_gamma(&[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(g.gamma, 0.5);
        assert!(!g.out_of_assumption);
        let g = estimate_gamma(&[1.0, 0.5, 0.6]).unwrap();
        assert_relative_eq!(g.gamma, 1.2, epsilon = 1e-15);
        assert!(g.out_of_assumption);
        let g = estimate_gamma(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.gamma, 0.0);
        assert!(g.degenerate);
        assert!(estimate_gamma(&[1.0]).is_err());
    }

    #[test]
    fn residual_bounds_are_in_range() {
        let (p, q, _, pairs) = random_instance(6, 8, 4);
        let (c1, c2) = residual_bounds(&p, &q, &pairs);
        assert!(c1 > 0.0 && c1 < 1.0);
        assert!(c2 > 0.0 && c2 <= 0.25);
    }

    #[test]
    fn tracker_fills_running_fields() {
        let (p, q, delta, pairs) = random_instance(7, 4, 3);
        let mut tracker = SkewTracker::new();
        let mut last = None;
        for t in 0..5 {
            let mut dt = delta.clone();
            dt.scale(0.5f64.powi(t));
            let qg = q.add(&dt).unwrap();
            let rep = SkewReport::compute(t as usize, 3, &p, &q, &qg, &pairs, 0.01).unwrap();
            let rep = tracker.observe(rep, &p, &q, &qg, 0.01).unwrap();
            if t == 0 {
                assert!(rep.gamma.is_none());
            } else {
                assert_relative_eq!(rep.gamma.unwrap().gamma, 0.5, epsilon = 1e-12);
                assert_eq!(rep.bound_holds, Some(true));
            }
            last = Some(rep);
        }
        let mut buf = Vec::new();
        write_reports(&mut buf, &[last.unwrap()]).unwrap();
        let back: SkewReport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back.client, 3);
    }

    #[test]
    fn trajectory_contract() {
        let mut log = TrajectoryLog::new(3);
        let mut p = vec![0.1, 1.0 / 3.0, -2e-300];
        for round in 1..=4 {
            log.record(7, round, &p).unwrap();
            p[0] += 1.0;
        }
        log.record(2, 1, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(log.entries[&7].len(), 4);
        assert_eq!(log.entries[&7][0].1, vec![0.1, 1.0 / 3.0, -2e-300]);
        assert!(log.record(7, 4, &p).is_err());
        assert!(log.record(7, 9, &[0.0]).is_err());
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = TrajectoryLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, log);
    }
}
