use std::path::PathBuf;

use fwd_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FwdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("missing depth: {0}")]
    MissingDepth(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {field}: {msg}")]
    Format {
        file: String,
        field: String,
        msg: String,
    },
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: u64, loss: f64 },
}

impl FwdError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn format(file: impl Into<String>, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Format {
            file: file.into(),
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<TensorError> for FwdError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(m) => Self::Shape(m),
            TensorError::Domain(m) => Self::Domain(m),
        }
    }
}

pub type Result<T, E = FwdError> = std::result::Result<T, E>;
