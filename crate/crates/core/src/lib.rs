//! Sparse network training with learned per-weight regularization.

pub mod analysis;
pub mod data;
pub mod engine;
pub mod error;
pub mod models;
pub mod par;
pub mod optim;
pub mod penalties;
pub mod pruning;
pub mod theory;

pub use error::{Error, Result};
