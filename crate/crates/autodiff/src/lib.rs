//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The tape records every primitive needed by message-passing graph layers
//! and by the constraint-residual losses: broadcasting arithmetic, matrix
//! products, row gathers/scatters, masked row softmax, and the usual
//! elementwise nonlinearities. Subgradients at kinks (ReLU, `abs`,
//! `max(x, 0)`) are fixed to zero.

mod check;
mod error;
mod tape;
mod tensor;

pub use check::{finite_difference_check, finite_difference_report, FdReport};
pub use error::{AutodiffError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
