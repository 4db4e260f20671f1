//! Synchronous federated averaging over a hand-written tensor and
//! neural-network kernel, with simulated and TCP transports.

pub mod data;
pub mod error;
pub mod fedavg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::Tensor;
