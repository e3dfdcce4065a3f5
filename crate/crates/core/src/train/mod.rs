//! Staged training: image-text, video-text pre-training and fine-tuning,
//! with evaluation, checkpoints and an optional self-critical phase.

pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
mod run;

pub use config::{DataConfig, DatasetRef, DownstreamTask, EvalConfig, RunConfig, StageKind, StageSpec};
pub use data::{preprocess, DataRegistry, Dataset, Item};
pub use eval::{evaluate_split, Evaluation, ModelPredictor, Predictor, ReportMeta};
pub use loss::{
    batch_gradients, compute_loss, sample_gradients, scst_gradients, sequence_log_prob, with_hypothesis_target, words,
    BatchGrad, Reward, ScstItem, ScstOutcome, ScstRecord,
};
pub use run::{run_stage, run_stages, CurvePoint, Cursor, Progress, RunContext, RunLog, TrainState};

use crate::media::MediaError;
use crate::metrics::MetricsError;
use crate::model::{CheckpointError, ModelError};
use crate::tasks::TaskError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("loss became {loss} at step {step} of stage {stage}")]
    Divergence { stage: String, step: u64, loss: f64 },
    #[error("batch has no scored target tokens")]
    EmptyBatch,
    #[error("dataset `{dataset}` has no `{field}` entries")]
    MissingField { dataset: String, field: &'static str },
    #[error("checkpoint does not match the run: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
