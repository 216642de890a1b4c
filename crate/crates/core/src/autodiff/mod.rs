//! Minimal reverse-mode differentiation: tensors, a tape of executed
//! operations, and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, BlockReport, GradCheck, GradCheckReport};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

