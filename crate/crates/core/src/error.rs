use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid label map: {0}")]
    LabelMap(String),

    #[error("label {label} has no entry in the parameter table (table has {table_len} labels)")]
    MissingLabel { label: usize, table_len: usize },

    #[error("parameter vector length {len} does not match {labels} labels (expected {expected})")]
    ParamLength {
        len: usize,
        labels: usize,
        expected: usize,
    },

    #[error("table {path}: label {label}: missing field `{field}`")]
    MissingField {
        path: PathBuf,
        label: String,
        field: String,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("objective returned a non-finite value{}", match .coordinate { Some(i) => format!(" while perturbing coordinate {i}"), None => String::new() })]
    NonFiniteObjective { coordinate: Option<usize> },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: loss = {loss}, offending gradient coordinates {offending:?}")]
    Divergence {
        step: usize,
        loss: f64,
        offending: Vec<usize>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
