//! Synthetic data, the training and pruning driver, evaluation and run
//! reports.
//!
//! A run directory holds `config.toml`, `metrics.csv`, `prune_log.jsonl`,
//! `summary.json`, `checkpoints/` and, when capturing, `maps/epoch_NNNN/`.

mod config;
mod data;
mod eval;
mod report;
mod train;

use thiserror::Error;

use crate::clusterlab::ClusterError;
use crate::losses::LossError;
use crate::optim::OptimError;
use crate::pruner::PruneError;
use crate::segnet::{CheckpointError, NetworkError};
use crate::tensor::TensorError;

pub use config::{DatasetSpec, Precision, TrainConfig};
pub use data::{gen_synthetic, SyntheticDataset, BACKGROUND, ELLIPSE, RING};
pub use eval::{argmax_labels, dice, evaluate_labels, hd95, percentile, Evaluation};
pub use report::{analyze_run, report_run, AnalyzeOutputs, ReportOutputs};
pub use train::{
    evaluate_split, run_training, run_training_as, EpochMetrics, RunArtifacts, RunSummary, CHECKPOINT_DIR, CONFIG_FILE,
    FINAL_CHECKPOINT, INITIAL_CHECKPOINT, MAPS_DIR, METRICS_FILE, PRUNE_LOG_FILE, SUMMARY_FILE,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("run directory: {0}")]
    Run(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
