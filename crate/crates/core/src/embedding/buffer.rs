//! Additive item-embedding buffers used for personalization.

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// W = A·B with A zero-initialized (m×r) and B Gaussian (r×d).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBuffer {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankBuffer {
    /// Fresh buffer: A = 0, B ~ N(0, 1/r).
    pub fn new<R: Rng + ?Sized>(m: usize, d: usize, rank: usize, rng: &mut R) -> Result<LowRankBuffer> {
        if rank == 0 || rank > m.min(d) {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} must be in 1..={} for a {m}x{d} item matrix",
                m.min(d)
            )));
        }
        Ok(LowRankBuffer {
            a: Matrix::zeros(m, rank),
            b: Matrix::random_normal(rank, d, (1.0 / rank as f64).sqrt(), rng),
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix) -> Result<LowRankBuffer> {
        if a.cols() != b.rows() {
            return Err(Error::shape(format!("B with {} rows", a.cols()), b.rows()));
        }
        Ok(LowRankBuffer { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Number of trainable values, r·(m + d).
    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }

    pub fn product(&self) -> Matrix {
        self.a.matmul(&self.b).expect("conforming factors")
    }
}

/// Dense m×d buffer, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct FullBuffer {
    pub w: Matrix,
}

impl FullBuffer {
    pub fn new(m: usize, d: usize) -> FullBuffer {
        FullBuffer { w: Matrix::zeros(m, d) }
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols()
    }
}

/// Q + A·B, leaving the inputs untouched.
pub fn merge(q: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (m, d) = q.shape();
    a.ensure_shape(m, a.cols())?;
    b.ensure_shape(a.cols(), d)?;
    let mut out = q.clone();
    for i in 0..m {
        let a_row = a.row(i);
        if a_row.iter().all(|&x| x == 0.0) {
            continue;
        }
        let dst = out.row_mut(i);
        for (k, &ak) in a_row.iter().enumerate() {
            for (o, &bk) in dst.iter_mut().zip(b.row(k)) {
                *o += ak * bk;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn construction_contract() {
        let mut rng = stream(1, Purpose::ClientInit, &[0]);
        let buf = LowRankBuffer::new(50, 16, 2, &mut rng).unwrap();
        assert!(buf.a.as_slice().iter().all(|&x| x == 0.0));
        assert!(buf.b.as_slice().iter().any(|&x| x != 0.0));
        assert_eq!(buf.param_count(), 2 * (50 + 16));
        assert!(LowRankBuffer::new(50, 16, 0, &mut rng).is_err());
        assert!(LowRankBuffer::new(50, 16, 17, &mut rng).is_err());
        assert!(LowRankBuffer::new(3, 16, 4, &mut rng).is_err());
    }

    #[test]
    fn b_variance_is_one_over_rank() {
        let mut rng = stream(2, Purpose::ClientInit, &[0]);
        let buf = LowRankBuffer::new(10, 4000, 4, &mut rng).unwrap();
        let v: f64 = buf.b.as_slice().iter().map(|x| x * x).sum::<f64>() / 16000.0;
        assert!((v - 0.25).abs() < 0.01, "{v}");
    }

    #[test]
    fn merge_with_zero_a_is_exact() {
        let mut rng = stream(3, Purpose::GlobalInit, &[]);
        let q = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let buf = LowRankBuffer::new(6, 3, 2, &mut rng).unwrap();
        assert_eq!(merge(&q, &buf.a, &buf.b).unwrap(), q);
    }

    #[test]
    fn merge_rank_one_outer_product() {
        let q = Matrix::zeros(3, 4);
        let mut a = Matrix::zeros(3, 1);
        a.set(0, 0, 1.0);
        let b = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let out = merge(&q, &a, &b).unwrap();
        let mut expected = Matrix::zeros(3, 4);
        expected.set(0, 0, 1.0);
        assert_eq!(out, expected);
    }

    #[test]
    fn merge_matches_triple_loop() {
        let mut rng = stream(4, Purpose::GlobalInit, &[]);
        let q = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let a = Matrix::random_normal(7, 3, 1.0, &mut rng);
        let b = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let merged = merge(&q, &a, &b).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((merged.get(i, j) - q.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_shape_mismatch() {
        let q = Matrix::zeros(3, 4);
        assert!(merge(&q, &Matrix::zeros(2, 1), &Matrix::zeros(1, 4)).is_err());
        assert!(merge(&q, &Matrix::zeros(3, 2), &Matrix::zeros(1, 4)).is_err());
    }
}
