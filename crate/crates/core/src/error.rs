use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or dimension counts.
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; record a new tape first")]
    BackwardTwice,

    #[error("backward called on an empty tape")]
    EmptyTape,

    /// Invalid user-supplied configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("model load error: {0}")]
    Load(String),

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("wav error in {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by user input or configuration rather than a
    /// defect in the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Shape(_)
                | Error::InvalidAxis { .. }
                | Error::NonScalarLoss(_)
                | Error::BackwardTwice
                | Error::EmptyTape
        )
    }
}
