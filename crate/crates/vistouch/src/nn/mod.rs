//! Minimal reverse-mode autodiff and network building blocks.
//!
//! Everything is generic over [`crate::scalar::Scalar`], so the same graph
//! runs in f32 for training and f64 for finite-difference verification.

mod conv;
mod norm;
mod optim;
mod params;
mod tape;

pub use optim::{Adam, Sgd};
pub use params::{Bound, ParamStore};
pub use tape::{GradSink, Gradients, Tape, Var};
