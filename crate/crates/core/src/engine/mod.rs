//! Reverse-mode differentiation over dense 64-bit tensors.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
