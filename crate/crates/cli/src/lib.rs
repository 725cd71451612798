//! Experiment harness around `framer-core` and `framer-loss`: config
//! files, the training entry point, artifact writers and the ablation
//! suite. The `framer` binary is a thin clap layer over these functions.

pub mod ablation;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] framer_core::train::TrainError),
    #[error(transparent)]
    Loss(#[from] framer_loss::LossError),
    #[error(transparent)]
    Tensor(#[from] framer_core::tensor::TensorError),
    #[error(transparent)]
    Image(#[from] framer_core::image::ImageError),
    #[error(transparent)]
    Degrade(#[from] framer_core::degrade::DegradeError),
    #[error(transparent)]
    Analysis(#[from] framer_core::analysis::AnalysisError),
    #[error(transparent)]
    Spectral(#[from] framer_core::spectral::SpectralError),
    #[error(transparent)]
    Metrics(#[from] framer_core::metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] framer_core::checkpoint::CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
