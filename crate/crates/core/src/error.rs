use std::path::PathBuf;

use dat_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("IDX file {path}: {reason} (at byte offset {offset})")]
    Idx {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("checkpoint: {reason} (at byte offset {offset})")]
    Checkpoint { offset: usize, reason: String },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("run directory {0} already exists; pass --force to overwrite")]
    RunExists(PathBuf),
}

pub type Result<T, E = DatError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> DatError {
    DatError::Invalid {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DatError {
    let path = path.into();
    move |source| DatError::Io { path, source }
}
