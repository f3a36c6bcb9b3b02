//! Federated multimodal air-quality prediction, end to end on CPU.
//!
//! Everything a small federation needs: dense-tensor layers with
//! hand-derived backprop, the FiLM-fused image+tabular model, AQI banding
//! and synthetic fixtures, Dirichlet non-IID partitioning, the regression
//! and classification metric suites, synchronous FedAvg with weighted
//! aggregation, a mutual-TLS framed transport, and per-round resource
//! profiling.

pub mod data;
pub mod error;
pub mod federation;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod partition;
pub mod profiling;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use model::{build_model, Mode, Model, ModelConfig, Task};
pub use params::{GradientSet, Layout, ParameterSet};
pub use tensor::Tensor;
