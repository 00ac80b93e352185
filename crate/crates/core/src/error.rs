use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
    #[error("non-finite loss at step {step} of {stage}")]
    NonFiniteLoss { stage: &'static str, step: usize },
    #[error("missing {artifact}: run {producer}")]
    MissingArtifact { artifact: String, producer: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset {path}: {msg}")]
    DatasetFormat { path: PathBuf, msg: String },
    #[error("no runs found")]
    NoRuns,
    #[error("parameter mismatch: {}", .0.join(", "))]
    ParamMismatch(Vec<String>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
