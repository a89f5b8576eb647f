//! Per-visit clinical risk prediction with multi-scale causal dilated
//! convolution, scale-adaptive feature recalibration and a GRU backbone,
//! together with training, evaluation and interpretability tooling.
//!
//! Module map:
//! - [`numeric`]: dense vectors/matrices, activations, sparsemax, finite differences
//! - [`layers`]: convolution banks, recalibration blocks, GRU cell
//! - [`model`]: the assembled network, loss, reverse-mode gradients, parameter files
//! - [`training`]: Adam, the training loop, gradient checking
//! - [`data`]: CSV ingestion, imputation, splitting, synthetic cohorts, bootstrap
//! - [`metrics`]: AUROC, precision-recall curve, bootstrap evaluation
//! - [`interpret`]: recalibration traces and importance matrices
//! - [`cli`]: the `adacare` command-line workflows

pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
