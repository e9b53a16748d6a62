//! Dense `[batch, channel, height, width]` tensors with tape-based
//! reverse-mode differentiation.
//!
//! Values are generic over [`Real`]: training uses `f32`, gradient checks
//! use `f64`. The differentiable surface lives on [`Tape`]; the raw kernels
//! in [`kernels`] serve gradient-free callers.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use real::Real;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
