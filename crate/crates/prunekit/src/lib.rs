//! Structured filter pruning toolkit.
//!
//! The crate trains small convolutional classifiers, ranks filters by
//! distance to each layer's geometric median, applies soft and hard pruning
//! schedules, and searches per-group pruning rates with a Gaussian-process
//! surrogate so a target sparsity is hit with as little accuracy loss as
//! possible.

pub mod bayesopt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fpgm;
pub mod gp;
pub mod grouping;
pub mod layer;
pub mod loss;
pub mod network;
pub mod objective;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use network::Network;
pub use tensor::Tensor;
