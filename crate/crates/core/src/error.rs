use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value ({msg})")]
    Numeric { op: &'static str, msg: String },

    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{path}: row {row}, column {column}: {msg}")]
    Cell {
        path: PathBuf,
        row: usize,
        column: usize,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("split too short: {len} timesteps cannot host a window of {needed} (lookback + horizon)")]
    SplitTooShort { len: usize, needed: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's input rather than by a failed run.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
