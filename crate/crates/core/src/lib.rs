//! Decorrelated saliency-guided training.
//!
//! The crate trains small classifiers whose intermediate features are
//! decorrelated by group-wise ZCA whitening while a saliency-masking
//! consistency term keeps predictions stable when low-importance inputs are
//! replaced. It also carries the evaluation harness used to compare training
//! modes: deletion curves and their AUC, gradient distribution statistics,
//! saliency map export and effective-rank diagnostics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod saliency;
pub mod training;
pub mod whitening;

pub use error::{Error, Result};
pub use linalg::{EigenDecomposition, Matrix};
