//! Robust convolutional dictionary learning on long multivariate signals.
//!
//! The crate learns a set of short convolutional atoms from signals that may
//! span millions of samples and contain gross outliers. Training samples
//! small random windows per iteration, sparse-codes them with FISTA, trims
//! high-error patches inline, and takes one projected-gradient step on the
//! dictionary per batch. A two-stage pipeline reuses the trimming mask to
//! isolate rare events and learn a second dictionary on the flagged
//! residual.

pub mod cli;
pub mod config;
pub mod conv;
pub mod datagen;
pub mod error;
pub mod io;
pub mod learn;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod robust;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
