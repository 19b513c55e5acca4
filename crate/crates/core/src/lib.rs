//! Early-exit convolutional networks: a from-scratch tensor/layer stack,
//! joint multi-exit training, entropy-gated fast inference, compute-cost
//! accounting and threshold screening.

pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod layers;
pub mod model_io;
pub mod params;
pub mod screening;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{BranchSpec, ExitWeights, Network, NetworkSpec};
pub use inference::{ThresholdVector, EvalReport, ExitDecision};
pub use layers::{LayerSpec, Mode};
pub use params::{ParameterStore, Precision};
pub use tensor::{Shape, Tensor};
pub use training::TrainConfig;
