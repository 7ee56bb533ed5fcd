use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("capacity error: {ground_truths} ground truths but only {queries} queries")]
    Capacity {
        ground_truths: usize,
        queries: usize,
    },

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("format error in {path}{}: {detail}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Format {
        path: PathBuf,
        record: Option<usize>,
        detail: String,
    },

    #[error("training aborted at step {step}: non-finite loss")]
    NumericAbort { step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 2 configuration, 3 data, 4 numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedMode(_) => 2,
            Error::Annotation(_)
            | Error::Capacity { .. }
            | Error::EmptyBatch
            | Error::Generation(_)
            | Error::Format { .. }
            | Error::Io { .. } => 3,
            Error::NumericAbort { .. } | Error::Numeric { .. } => 4,
            Error::Shape { .. } | Error::Integrity(_) | Error::Determinism { .. } => 1,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
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

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        record: Option<usize>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            record,
            detail: detail.into(),
        }
    }
}
