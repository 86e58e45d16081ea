//! Visuo-tactile cross-modal generation toolkit.
//!
//! Contrastive visuo-tactile pretraining, touch-conditioned latent
//! diffusion with classifier-free guidance, masked hand-free training,
//! tactile-driven stylization (partial-noise editing), tactile-driven
//! shading estimation, and the evaluation metrics to verify them all at
//! desk scale on a built-in synthetic dataset.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod cvtp;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use error::{Error, Result};
pub use scalar::{Scalar, Tensor, TensorF32, TensorF64};
