use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate features: row {row} has zero norm")]
    DegenerateFeature { row: usize },

    #[error("mask has no foreground cells")]
    EmptyMask,

    #[error("label {label} at node {node} is outside 1..={classes}")]
    Label {
        node: usize,
        label: usize,
        classes: usize,
    },

    #[error("numeric failure in {stage} at iteration {iteration}")]
    Numeric { stage: &'static str, iteration: usize },

    #[error("expected a {expected} assignment stack")]
    Mode { expected: &'static str },

    #[error("matching set is missing pair ({0}, {1})")]
    IncompleteSet(usize, usize),

    #[error("instance too large for exhaustive search: {0}")]
    OracleSize(String),

    #[error("instance carries no ground truth")]
    MissingGroundTruth,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
