use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {left} {left_shape:?} vs {right} {right_shape:?}")]
    Shape {
        op: &'static str,
        left: String,
        left_shape: Vec<usize>,
        right: String,
        right_shape: Vec<usize>,
    },
    #[error("index error: {0}")]
    Index(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("non-finite loss in component `{component}`")]
    NonFinite { component: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        left: impl fmt::Display,
        left_shape: &[usize],
        right: impl fmt::Display,
        right_shape: &[usize],
    ) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            left_shape: left_shape.to_vec(),
            right: right.to_string(),
            right_shape: right_shape.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Short machine-parsable category, used for CLI exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index(_) => "index",
            Error::Config(_) => "config",
            Error::EmptyBatch => "empty-batch",
            Error::Format { .. } => "format",
            Error::NonFinite { .. } => "non-finite",
            Error::Io(_) => "io",
        }
    }
}
