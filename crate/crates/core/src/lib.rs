//! Exponential disparity probability volumes for self-supervised
//! single-image depth estimation.
//!
//! A network maps one image to per-pixel logits over a fixed set of
//! disparity levels. Shifting the image by every level and weighting by the
//! softmaxed, shifted logits synthesizes the other stereo view; the expected
//! level gives disparity. Training runs in two steps: view synthesis first,
//! then fine-tuning with occlusion masks derived from the volumes of both
//! views and mirrored disparity targets from a frozen copy of the network.

pub mod checkpoint;
pub mod error;
pub mod falnet;
pub mod gradsuite;
pub mod losses;
pub mod medvol;
pub mod metrics;
pub mod mom;
pub mod quantize;
pub mod scenes;
pub mod trainkit;
pub mod warp;

pub use error::{Error, Result};
