//! Regression training with set-sum data augmentation.
//!
//! Virtual training samples are formed by grouping real images into sets and
//! labelling each set with the sum of its members' labels; the network's
//! per-image predictions are summed and the loss is computed once per set.
//! The crate bundles everything needed to run that idea end to end at desk
//! scale: a small autodiff/CNN engine, the base regressor and its weight-shared
//! set evaluation, synthetic counting data, training loops, and agreement
//! statistics.

pub mod augment;
pub mod data;
pub mod error;
pub mod metrics;
pub mod regressor;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
