use std::io;

/// Errors produced anywhere in the pipeline.
///
/// The variants are grouped by how a caller is expected to react: bad
/// configuration and API misuse are programmer errors, data and format
/// errors come from inputs on disk, and numerical failures abort training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("empty duration set")]
    EmptyDurations,

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Shape mismatch on a named axis, reported as a configuration error.
    pub(crate) fn axis(op: &str, axis: &str, expected: usize, actual: usize) -> Self {
        Error::Config(format!(
            "{op}: axis `{axis}` expected {expected}, got {actual}"
        ))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
