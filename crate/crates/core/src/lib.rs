//! FuseInit: MSE-optimal fusion of neighboring neural-network layers.
//!
//! The crate trains small feed-forward networks (dense and 1-D convolutional
//! layers), estimates the first and second empirical moments of layer-boundary
//! activations, and collapses a pair of neighboring layers into a single layer
//! whose pre-activation output is the minimum-mean-square-error affine (or
//! convolutional) approximation of the original pair. The fused parameters
//! initialize a shallower network which is then retrained.
//!
//! Modules:
//! - [`nn`] — layers, activations, forward traces, gradients, SGD training.
//! - [`moments`] — empirical means, covariances, and windowed conv accumulators.
//! - [`fusion`] — closed-form MMSE fusion and layer-pair ranking.
//! - [`oracle`] — brute-force least-squares references used for verification.
//! - [`data`] — seeded synthetic datasets and CSV ingestion.
//! - [`pipeline`] — train → fuse → retrain experiments with paired baselines.
//!
//! All numerics are `f64`. Every seeded entry point is deterministic: the same
//! seed, config, and data produce bit-identical parameters and reports.

pub mod data;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod moments;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod verify;

pub use error::{Error, Result};
