//! End-to-end model: raw-audio feature extractor, LSTM and a Bayesian (or
//! deterministic baseline) head, with training, inference, checkpoints and
//! evaluation reports.

mod checkpoint;
mod config;
mod infer;
mod network;
mod optim;
mod report;
mod train;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{peek_header, Checkpoint, Header, MAGIC, VERSION};
pub use config::{ConvSpec, ModelConfig, SystemKind};
pub use infer::{encode, fit_tuning, predict_distribution, recording_seed, PredictionDistribution};
pub use network::{build_model, Head, Model};
pub use optim::Adam;
pub use report::{
    compare, evaluate, format_comparison, format_metrics_csv, parse_metrics_csv, score, write_evaluation,
    ComparisonRow, Evaluation, Metric, RecordingMetrics, Scores, Summary, METRICS_HEADER, MTL_NOTE,
    SIGNIFICANCE_LEVEL,
};
pub use train::{
    complexity_weight, segments, train, train_best, train_epoch, EpochRecord, LossTerms, Segment, StepLoss, TrainBatch,
    TrainState,
};

use crate::autodiff::AutodiffError;
use crate::dataset::DatasetError;
use crate::losses::MetricError;
use crate::stats::StatsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in the {term} term ({detail})")]
    NonFiniteLoss { term: &'static str, detail: String },
    #[error("the {0} split is empty")]
    EmptySplit(String),
    #[error("need at least 2 stochastic passes, got {0}")]
    TooFewPasses(usize),
    #[error("recording {id}: {predicted} predicted frames but {labels} label frames")]
    FrameMismatch { id: String, predicted: usize, labels: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("report: {0}")]
    Report(String),
    #[error("reports cover different recordings: {0}")]
    ReportMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
