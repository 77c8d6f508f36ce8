use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An invalid configuration value (head count, weight count, thresholds...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss, gradient, or probe evaluated to a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input data is missing, corrupt, or inconsistent.
    #[error("data error in {}: {detail}", path.display())]
    Data { path: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
