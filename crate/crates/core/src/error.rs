use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum SruError {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty after {stage}")]
    EmptyDataset { stage: &'static str },

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("loss function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("unknown {what} `{key}`")]
    Lookup { what: &'static str, key: String },

    #[error("integrity error at byte offset {offset}: {message}")]
    Integrity { offset: u64, message: String },

    #[error("unsupported format: {0}")]
    Version(String),

    #[error("stage `{stage}` requires output of `{missing_stage}` ({path}); run it first")]
    StageDependency {
        stage: &'static str,
        missing_stage: &'static str,
        path: PathBuf,
    },

    #[error("artifact {path} is stale: recorded config hash {recorded}, current {current}")]
    StaleArtifact {
        path: PathBuf,
        recorded: String,
        current: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SruError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SruError::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        SruError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SruError>;
