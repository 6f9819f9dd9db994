//! Stackable masked low-rank adapters for continual adaptation of small
//! attention networks, with the baselines, training loop and metrics used to
//! evaluate them.

pub mod adapters;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod json;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod trainer;

use adapters::AdapterError;
use tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("task {got} trained out of order, expected task {expected}")]
    Sequence { expected: u32, got: u32 },
    #[error("unknown concept {0}")]
    UnknownConcept(u32),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
