//! Probabilistic spatial smoothing for convolutional networks.

pub mod analysis;
pub mod autograd;
pub mod data;
pub mod ensembling;
mod error;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod smoothing;
pub mod tensor;
pub mod train;

pub use autograd::{PadMode, PoolKind, Tape, Var};
pub use ensembling::{PredictiveDistribution, Probs};
pub use error::{Error, Result};
pub use models::{Mode, Model, ModelSpec};
pub use smoothing::{BlurKernel, ProbConfig, ProbVariant};
pub use tensor::Tensor;
