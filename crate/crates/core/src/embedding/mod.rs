//! Embedding containers, prediction and loss, gradients, and the optimizer.

pub mod adam;
pub mod buffer;
pub mod grads;
pub mod io;
pub mod math;
pub mod matrix;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, RowAdam};
pub use buffer::{merge, FullBuffer, LowRankBuffer};
pub use grads::{batch_gradient, effective_row, grad_full_buffer, grad_item, grad_lowrank, grad_user, BatchGrad, BufferView, RowGrads, Wants};
pub use math::{bce_loss, clamp_probability, dot, norm, predict, sigmoid, sigmoid_prime, CLAMP_EPS};
pub use matrix::Matrix;

/// A user embedding p_u.
pub type UserEmbedding = Vec<f64>;

/// Whether an item matrix is the server's aggregate or a client's copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    Global,
    Local,
}

/// An m×d item-embedding matrix tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMatrix {
    pub role: MatrixRole,
    pub values: Matrix,
}

impl ItemMatrix {
    pub fn global(values: Matrix) -> ItemMatrix {
        ItemMatrix {
            role: MatrixRole::Global,
            values,
        }
    }

    pub fn local(values: Matrix) -> ItemMatrix {
        ItemMatrix {
            role: MatrixRole::Local,
            values,
        }
    }

    pub fn into_inner(self) -> Matrix {
        self.values
    }
}

impl Deref for ItemMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.values
    }
}

impl DerefMut for ItemMatrix {
    fn deref_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }
}
