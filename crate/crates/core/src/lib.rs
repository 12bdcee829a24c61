//! Photorealistic style transfer auto-encoders built on a small from-scratch
//! CNN op set, with an aging-evolution search that prunes the maximal
//! auto-encoder (PhotoNet) into faster variants under a teacher-student
//! objective.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f32` tensors, matmul and a Jacobi symmetric eigensolver.
//! - [`nn`]: 3×3 reflection-padded convolution, pooling, resampling, instance
//!   norm, each with an exact reverse-mode gradient.
//! - [`transfer`]: whitening-coloring (WCT) and AdaIN feature transfers.
//! - [`arch`]: the 31-slot architecture code, graph construction, forward pass
//!   and flop accounting.
//! - [`train`]: decoder training by image reconstruction.
//! - [`metrics`]: SSIM, edge SSIM, Gram loss and the search objective.
//! - [`nas`]: the evolutionary search and the random-search baseline.
//! - [`io`]: weights and image files, config and telemetry, and the CLI.

pub mod arch;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nas;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
