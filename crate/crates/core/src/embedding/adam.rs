//! Adam with bias correction, in a dense and a row-sparse (lazy) flavor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    #[inline]
    fn corrections(&self, step: u64) -> (f64, f64) {
        let t = step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    #[inline]
    fn update(&self, param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let step = lr / c1;
        let inv_c2 = 1.0 / c2;
        for (((x, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *x -= step * *mi / ((*vi * inv_c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> AdamState {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam step on `param` in place.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} values", self.m.len()),
                format!("param {} / grad {}", param.len(), grad.len()),
            ));
        }
        self.step += 1;
        let (c1, c2) = self.config.corrections(self.step);
        self.config.update(param, grad, &mut self.m, &mut self.v, lr, c1, c2);
        Ok(())
    }
}

/// Adam over the rows of a matrix where each step touches only a few rows.
///
/// Rows absent from a step keep both their values and their moments. Bias
/// correction uses the global step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowAdam {
    pub config: AdamConfig,
    pub cols: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl RowAdam {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> RowAdam {
        RowAdam {
            config,
            cols,
            m: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
            step: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len().checked_div(self.cols).unwrap_or(0)
    }

    /// Update `param` (row-major, `cols` wide) at the listed rows.
    pub fn step(&mut self, param: &mut [f64], rows: &[usize], grads: &[f64], lr: f64) -> Result<()> {
        let c = self.cols;
        if param.len() != self.m.len() || grads.len() != rows.len() * c {
            return Err(Error::shape(
                format!("param {} / grad {}", self.m.len(), rows.len() * c),
                format!("param {} / grad {}", param.len(), grads.len()),
            ));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= self.rows()) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range")));
        }
        self.step += 1;
        let (c1, c2) = self.config.corrections(self.step);
        for (k, &r) in rows.iter().enumerate() {
            let span = r * c..(r + 1) * c;
            self.config.update(
                &mut param[span.clone()],
                &grads[k * c..(k + 1) * c],
                &mut self.m[span.clone()],
                &mut self.v[span],
                lr,
                c1,
                c2,
            );
        }
        Ok(())
    }
}
