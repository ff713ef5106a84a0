//! Neural-network training library built around structured data gradient
//! pruning: during backprop the gradient flowing *backward through the data
//! path* of a convolution is pruned to an n-of-m sparsity pattern along the
//! channel dimension, while the weight gradient is always computed from the
//! dense signal. The library is deliberately small and deterministic: plain
//! `f32` tensors in channels-last layout, convolution lowered to matrix
//! multiplication via im2col, reverse-mode gradients layer by layer, and a
//! training loop whose every random choice derives from one seed.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, the fixed-order matmul kernels, im2col/col2im
//! - [`prune`]: n-of-m group pruning (random, magnitude, rescaled magnitude)
//! - [`nn`]: layers, reverse-mode gradients, checkpoints
//! - [`gradcheck`]: finite-difference utilities used by the gradient tests
//! - [`data`]: dataset container, IDX and CIFAR-10 binary loaders, synthetic data
//! - [`train`]: SGD with momentum, cyclic learning rate, the training loop
//! - [`perf`]: wall-clock layer profiles and the analytic speedup model
//! - [`config`]: experiment configuration, model builders, dataset resolution

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod perf;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use data::Dataset;
pub use error::{Error, Result};
pub use prune::{PruneConfig, PruneFunction, RescaleScope};
pub use tensor::{ConvShape, Tensor};
pub use train::{EpochMetric, TrainOutcome};
