//! Federated matrix factorization with per-client low-rank calibration buffers.

pub mod client;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod privacy;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
