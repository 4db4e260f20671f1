use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor argument had the wrong extent along `axis`.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    Validation(String),

    #[error("invalid state: {0}")]
    State(String),

    /// Malformed bytes; `offset` is the byte position where decoding gave up.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("protocol error{}: {message}", worker.map(|w| format!(" (worker {w})")).unwrap_or_default())]
    Protocol {
        worker: Option<u32>,
        message: String,
    },

    #[error("connection error: {0}")]
    Connectivity(String),
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn protocol(worker: Option<u32>, msg: impl Into<String>) -> Self {
        Error::Protocol {
            worker,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
