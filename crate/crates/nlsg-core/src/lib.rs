//! Estimation of true segmentation label distributions and per-annotator
//! spatial confusion matrices from noisy multi-annotator labels.
//!
//! The crate couples a segmentation network with per-annotator confusion
//! networks: predicted noisy labels are the product of a per-pixel
//! column-stochastic confusion matrix and the estimated true distribution.
//! Training minimises cross-entropy against the observed annotations plus a
//! trace penalty on the confusion matrices, which drives them toward the
//! annotators' actual error patterns. Classical fusion baselines, metrics,
//! an annotator noise simulator and an exact small-scale check of the trace
//! recovery argument live alongside the model.

pub mod error;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod sim;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
