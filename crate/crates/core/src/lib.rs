//! Unsupervised domain adaptation lab built around the maximum squares loss.
//!
//! The crate bundles a small reverse-mode differentiation engine, the target
//! loss family (entropy, scaled entropy, maximum squares and its image-wise
//! class-balanced variant), multi-level self-produced guidance, two toy
//! models, synthetic domain-shift generators, the SGD training protocol and
//! evaluation metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
