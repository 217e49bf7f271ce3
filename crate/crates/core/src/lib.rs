//! Curvature-aware low-rank robust fine-tuning.
//!
//! A small LoRA-adapted MLP encoder is fine-tuned against a frozen class
//! head with PGD inputs, a layerwise low-rank adversarial weight perturbation
//! whose rank follows a curvature curriculum, and a Gram-volume term that
//! pulls clean, adversarial and weight-perturbed features together. The
//! [`diagnostics`] module measures the resulting geometry.
//!
//! Everything is deterministic given a master seed; see [`rng::sub_seed`].

// `!(x > 0.0)` is the NaN-rejecting form used by every validator.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod awp;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gram;
pub mod hvp;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::DenseMatrix;
