//! Reverse-mode automatic differentiation over dense float64 tensors.
//!
//! A [`Tape`] records every operation performed on [`Var`] handles during a
//! forward pass. [`backward`](Tape::backward) then walks the recording in
//! reverse, accumulating gradients for every leaf. The op set is the minimum
//! needed by the network blocks and loss terms: elementwise arithmetic with
//! leading-dim broadcast, matmul, same-padded convolution, pointwise
//! nonlinearities, reductions, and a few fused penalty kernels with
//! hand-derived backward rules (validated by [`grad_check`]).

mod gradcheck;
mod ops;
mod tape;
pub mod tensor;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, grad_check_multi};
pub use ops::{concat, stack};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
}
