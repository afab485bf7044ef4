//! Unsupervised graph anomaly detection with bandit-selected neighborhoods
//! and distinguishing message passing.

pub mod autodiff;
pub mod bandit;
pub mod baseline;
pub mod error;
pub mod graph;
pub mod inject;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pool;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
