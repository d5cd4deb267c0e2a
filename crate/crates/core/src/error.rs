use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("unknown task `{0}` (expected vif, mef or mff)")]
    UnknownTask(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
