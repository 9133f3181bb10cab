//! Command-line front end and render service.

// casts through `Real` are identities only in the default f64 build
#![allow(clippy::unnecessary_cast)]

pub mod bench;
pub mod cli;
pub mod posefile;
pub mod protocol;
pub mod serve;

use fwd_core::FwdError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] FwdError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for bad flags and unreadable or malformed inputs, 3 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
            Self::Core(e) => match e {
                FwdError::Format { .. }
                | FwdError::Shape(_)
                | FwdError::Domain(_)
                | FwdError::MissingDepth(_)
                | FwdError::EmptyInput(_) => EXIT_USAGE,
                FwdError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
                FwdError::Io { .. } | FwdError::TrainingDiverged { .. } => EXIT_RUNTIME,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

// The book's code blocks run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/serving.md")]
    mod serving {}
}
