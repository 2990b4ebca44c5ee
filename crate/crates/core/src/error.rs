use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The bytes or text do not follow the expected file layout.
    #[error("format error: {0}")]
    Format(String),

    /// A record parsed fine but violates a data invariant.
    #[error("validation error at record {index}: {reason}")]
    Validation { index: usize, reason: String },

    #[error("unsupported factor {factor}: {reason}")]
    UnsupportedFactor { factor: f64, reason: String },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch too small for {op}: batch statistics need at least 2 samples, got {got}")]
    BatchTooSmall { op: &'static str, got: usize },

    #[error("config error: {0}")]
    Config(String),

    /// A precondition of the call was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate loss: every entry is masked out")]
    DegenerateLoss,

    #[error(
        "singular denominator in layer '{layer}' (unit {unit}, value {value:e}); \
         LRP-0 cannot divide by zero, use the epsilon rule instead"
    )]
    SingularDenominator {
        layer: String,
        unit: usize,
        value: f64,
    },

    #[error("unsupported layer for relevance propagation: {0}")]
    UnsupportedLayer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the caller's configuration rather than by data or I/O.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnsupportedFactor { .. } | Error::Contract(_)
        )
    }
}
