//! Optimiser, learning-rate schedule, losses, metrics and the
//! cross-validated tuning loop.

mod loss;
mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use loss::{bce_loss, label_mask, mse, mse_loss, rmse};
pub use metrics::{auroc, average_precision, mean_task_auroc};
pub use optim::{clip_global_norm, AdamW, OptimizerState};
pub use schedule::{Decay, Schedule};
pub use trainer::{
    cross_validate, encode_all, evaluate, predict_all, train_run, FoldOutcome, Objective, RunRecord, TunedModel,
    TuningConfig,
};

use thiserror::Error;

use crate::graph::GraphError;
use crate::models::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient keys do not match the trainable set: {0}")]
    GradientKeys(String),
    #[error("metric undefined: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, TrainingError>;
