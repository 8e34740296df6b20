use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("{op}: shape mismatch between {left} and {right}")]
    Shape {
        op: &'static str,
        left: Shape4,
        right: Shape4,
    },

    /// A precondition on arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data (labels, rasters, manifests) is out of range.
    #[error("data error: {0}")]
    Data(String),

    /// Inconsistent network or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Optimization diverged or produced non-finite values.
    #[error("training error in {layer}: {message}")]
    Training { layer: String, message: String },

    /// Malformed or truncated file; `offset` is the byte position where
    /// parsing stopped.
    #[error("{}: {message} (at byte {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: Shape4, right: Shape4) -> Self {
        Self::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem or file contents rather than
    /// by argument contracts.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. } | Self::Format { .. })
    }
}
