//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the watermarking toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem failure while reading or writing `path`.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input file is not a format this crate reads.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Image is smaller than an operation's minimum working size.
    #[error("image too small: {0}")]
    UndersizedImage(String),

    /// A configuration value violates its documented constraints.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Key material is inconsistent (dimensions, kind, payload length).
    #[error("invalid key: {0}")]
    InvalidKey(String),

    /// A tensor container file is truncated, has a bad magic, or an
    /// unsupported version.
    #[error("corrupt tensor file: {0}")]
    CorruptFile(String),

    /// Not enough samples to fit a statistic.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// Argument outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
