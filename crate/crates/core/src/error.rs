use std::path::PathBuf;

use crate::data::Group;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for {context} of size {len}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("group (y={}, a={}) has no examples", .0.y, .0.a)]
    EmptyGroup(Group),

    #[error("train-mode fair dropout needs an example id")]
    MissingExampleId,

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        history: Box<crate::trainer::History>,
    },

    #[error("{0}")]
    Probe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
