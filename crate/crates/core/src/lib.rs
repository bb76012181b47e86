//! Learning with noisy labels by label refurbishment.
//!
//! The crate trains two peer classifiers on a dataset whose observed labels are
//! partly wrong. Each round, a two-component Gaussian mixture over per-example
//! losses yields a clean-label confidence `w`, the peers' averaged and sharpened
//! predictions yield a pseudo-label, and the training target becomes
//! `w * observed + (1 - w) * pseudo`.
//!
//! Module map:
//!
//! - [`matrix`], [`nn`]: dense numerics and a small MLP with backprop and SGD.
//! - [`data`], [`noise`]: synthetic blobs, CSV IO, and label corruption.
//! - [`loss_model`]: per-example losses and the two-component EM fit.
//! - [`refurbish`]: sharpening, pseudo-labels, refurbished targets, batch
//!   uniformity regularizer.
//! - [`trainer`]: warm-up plus co-training rounds, with ablation switches.
//! - [`dynamics`]: group decomposition, noise-rate estimation, top-loss audit,
//!   JSON Lines records.
//! - [`cli`]: the `robust-lr` command line.
//!
//! Ground-truth labels live only in [`data::LabeledDataset`]. Everything on the
//! training path takes a [`data::NoisyDataset`], which has no field for them.

pub mod cli;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod loss_model;
pub mod matrix;
pub mod model_io;
pub mod nn;
pub mod noise;
pub mod refurbish;
pub mod simplex;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use simplex::SoftLabel;
