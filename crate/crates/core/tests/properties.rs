mod common;

use common::{bce_sum, numeric_gradient, random_matrix, random_vec, relative_error};
use fedclr::embedding::{batch_gradient, dot, grad_full_buffer, grad_item, grad_lowrank, grad_user, BufferView, Matrix, Wants};
use fedclr::eval::{metrics_at_k, ndcg_at, rank_test_item};
use fedclr::privacy::{clip_update, privatize_upload};
use fedclr::server::{fedavg, sample_clients, Upload};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lowrank_loss(p: &[f64], q: &Matrix, a: &Matrix, b: &Matrix, batch: &[(usize, f64)]) -> f64 {
    let w = a.matmul(b).unwrap();
    let (logits, labels): (Vec<f64>, Vec<f64>) = batch
        .iter()
        .map(|&(i, r)| {
            let qe: Vec<f64> = q.row(i).iter().zip(w.row(i)).map(|(x, y)| x + y).collect();
            (dot(p, &qe), r)
        })
        .unzip();
    bce_sum(&logits, &labels)
}

fn instance(seed: u64) -> (Vec<f64>, Matrix, Matrix, Matrix, Vec<(usize, f64)>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=8);
    let d = rng.random_range(2..=4);
    let r = rng.random_range(1..=2);
    let p = random_vec(&mut rng, d, 1.0);
    let q = random_matrix(&mut rng, m, d, 1.0);
    let a = random_matrix(&mut rng, m, r, 0.5);
    let b = random_matrix(&mut rng, r, d, 0.5);
    let n = rng.random_range(1..=6);
    let batch = (0..n)
        .map(|_| (rng.random_range(0..m), if rng.random_bool(0.5) { 1.0 } else { 0.0 }))
        .collect();
    (p, q, a, b, batch)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lowrank_gradients_match_finite_differences(seed in any::<u64>()) {
        let (p, q, a, b, batch) = instance(seed);
        let (da, db) = grad_lowrank(&p, &q, &a, &b, &batch).unwrap();
        let da = da.to_dense(a.rows());
        let num_a = numeric_gradient(a.as_slice(), 1e-6, |x| {
            lowrank_loss(&p, &q, &Matrix::from_vec(a.rows(), a.cols(), x.to_vec()).unwrap(), &b, &batch)
        });
        let num_b = numeric_gradient(b.as_slice(), 1e-6, |x| {
            lowrank_loss(&p, &q, &a, &Matrix::from_vec(b.rows(), b.cols(), x.to_vec()).unwrap(), &batch)
        });
        prop_assert!(relative_error(da.as_slice(), &num_a) < 1e-5);
        prop_assert!(relative_error(db.as_slice(), &num_b) < 1e-5);
    }

    #[test]
    fn user_and_item_gradients_match_finite_differences(seed in any::<u64>()) {
        let (p, q, a, b, batch) = instance(seed);
        let rows: Vec<&[f64]> = batch.iter().map(|&(i, _)| q.row(i)).collect();
        let labels: Vec<f64> = batch.iter().map(|&(_, r)| r).collect();
        let g = grad_user(&p, &rows, &labels).unwrap();
        let num = numeric_gradient(&p, 1e-6, |x| {
            let logits: Vec<f64> = rows.iter().map(|q| dot(x, q)).collect();
            bce_sum(&logits, &labels)
        });
        prop_assert!(relative_error(&g, &num) < 1e-5);

        let (i, r) = batch[0];
        let gi = grad_item(&p, q.row(i), r).unwrap();
        let num = numeric_gradient(q.row(i), 1e-6, |x| bce_sum(&[dot(&p, x)], &[r]));
        prop_assert!(relative_error(&gi, &num) < 1e-5);

        let w = a.matmul(&b).unwrap();
        let gw = grad_full_buffer(&p, q.row(i), w.row(i), r).unwrap();
        let num = numeric_gradient(w.row(i), 1e-6, |x| {
            let qe: Vec<f64> = q.row(i).iter().zip(x).map(|(u, v)| u + v).collect();
            bce_sum(&[dot(&p, &qe)], &[r])
        });
        prop_assert!(relative_error(&gw, &num) < 1e-5);

        // the batched path agrees with the per-example functions
        let all = Wants { user: true, items: true, lowrank: false };
        let bg = batch_gradient(&p, &q, BufferView::None, &batch, all);
        prop_assert!(relative_error(&bg.user, &g) < 1e-12);
        let dense = bg.items.to_dense(q.rows());
        let num = numeric_gradient(q.as_slice(), 1e-6, |x| {
            let qm = Matrix::from_vec(q.rows(), q.cols(), x.to_vec()).unwrap();
            let logits: Vec<f64> = batch.iter().map(|&(i, _)| dot(&p, qm.row(i))).collect();
            bce_sum(&logits, &labels)
        });
        prop_assert!(relative_error(dense.as_slice(), &num) < 1e-5);
    }

    #[test]
    fn fedavg_matches_naive_weighted_sum(seed in any::<u64>(), n in 1usize..8, rows in 1usize..6, cols in 1usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qs: Vec<Matrix> = (0..n).map(|_| random_matrix(&mut rng, rows, cols, 2.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let uploads: Vec<Upload> = qs.iter().zip(&w).enumerate().map(|(c, (q, &w))| Upload { client: c * 3, q, weight: w }).collect();
        let got = fedavg(&uploads).unwrap();
        for k in 0..rows * cols {
            let naive: f64 = qs.iter().zip(&w).map(|(q, w)| w * q.as_slice()[k]).sum();
            prop_assert!((got.as_slice()[k] - naive).abs() < 1e-12);
            let lo = qs.iter().map(|q| q.as_slice()[k]).fold(f64::INFINITY, f64::min);
            let hi = qs.iter().map(|q| q.as_slice()[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= got.as_slice()[k] && got.as_slice()[k] <= hi);
        }
        let mut shuffled = uploads.clone();
        shuffled.reverse();
        shuffled.rotate_left(n / 2);
        prop_assert_eq!(fedavg(&shuffled).unwrap(), got);
    }

    #[test]
    fn sampling_is_a_deterministic_cohort(n in 1usize..60, frac in 0.01f64..=1.0, round in 0usize..100, seed in any::<u64>()) {
        let sizes: Vec<f64> = (0..n).map(|u| (u % 7 + 1) as f64).collect();
        let plan = sample_clients(&sizes, frac, round, seed).unwrap();
        prop_assert_eq!(plan.clients.len(), ((frac * n as f64) - 1e-9).ceil().max(1.0) as usize);
        prop_assert!(plan.clients.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((plan.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(sample_clients(&sizes, frac, round, seed).unwrap(), plan);
    }

    #[test]
    fn clipping_never_grows_the_update(seed in any::<u64>(), c in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = random_matrix(&mut rng, 4, 3, 3.0);
        let clipped = clip_update(&delta, c);
        prop_assert!(clipped.frobenius_norm() <= delta.frobenius_norm() + 1e-12);
        prop_assert!(clipped.frobenius_norm() <= c * (1.0 + 1e-12));
    }

    #[test]
    fn privatize_without_noise_or_clip_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let down = random_matrix(&mut rng, 5, 3, 1.0);
        let up = random_matrix(&mut rng, 5, 3, 1.0);
        let out = privatize_upload(&up, &down, Some(f64::INFINITY), 0.0, seed, &[1, 2]).unwrap();
        prop_assert_eq!(out.q, up);
    }

    #[test]
    fn ranking_is_invariant_under_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 2..120), pos in any::<prop::sample::Index>()) {
        let cand: Vec<usize> = (0..scores.len()).collect();
        let test = pos.index(scores.len());
        let r = rank_test_item(&cand, &scores, test).unwrap();
        let sig: Vec<f64> = scores.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let cubed: Vec<f64> = scores.iter().map(|&x| x * x * x + 2.0 * x).collect();
        prop_assert_eq!(rank_test_item(&cand, &cubed, test).unwrap(), r);
        // σ can collapse distinct large logits into equal probabilities, which only ever ranks worse
        prop_assert!(rank_test_item(&cand, &sig, test).unwrap() >= r);
        let m = metrics_at_k(&[r], 10).unwrap();
        prop_assert!(m.ndcg <= m.hr);
        prop_assert_eq!(m.ndcg, ndcg_at(r, 10));
    }
}
