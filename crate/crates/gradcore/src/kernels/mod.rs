//! Forward and adjoint kernels shared by the tape and by gradient-free callers.

pub mod conv;
pub mod image;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use image::*;
