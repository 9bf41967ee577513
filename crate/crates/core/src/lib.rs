//! Graph convolutional networks trained on sampled sub-networks.
//!
//! The crate covers the renormalised propagation operator, node-wise and
//! layer-wise samplers (including a learned, parent-conditioned sampler),
//! the Monte-Carlo propagation estimators, a variance penalty for training
//! the sampler, and a minibatch trainer.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod sampler;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod variance;

pub use config::TrainConfig;
pub use error::{Error, Result};
