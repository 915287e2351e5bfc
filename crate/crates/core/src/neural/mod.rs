//! Small dense/recurrent network substrate with hand-written backpropagation.
//!
//! Parameters of a network live in one flat `Vec<f64>` so that optimizers,
//! checkpoints and gradient checks can treat them uniformly.

mod layers;

pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod optim;
pub mod spec;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use network::{forward_row, forward_sequence, ForwardTrace, Network};
pub use optim::{Optimizer, OptimizerKind, TrainConfig};
pub use spec::{Activation, LayerSpec, LossKind, NetworkSpec, Shape};
pub use tensor::{Tensor, Tensor2, Tensor3};
pub use train::{argmax, fit, predict_proba, train, Dataset, Targets, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
}
