//! Collective multi-student knowledge distillation on a small dense-matrix
//! reverse-mode autodiff engine.
//!
//! - [`autodiff`]: tensors, backward pass, finite-difference checks, SGD
//! - [`losses`]: soft cross-entropy, entropy, KL divergence, the distillation
//!   and collection losses
//! - [`models`]: seeded MLPs and the checkpoint format
//! - [`data`]: Gaussian blobs, IDX files, batching
//! - [`trainer`]: schedules and the training protocols
//! - [`metrics`]: accuracy, correlation number, accumulation profiles
//! - [`fidelity`]: randomized gradient checks of the full objective

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fidelity;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
