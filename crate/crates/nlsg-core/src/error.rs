use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("zero-sum column {column} at pixel ({x}, {y}); cannot normalize")]
    ZeroColumn { x: usize, y: usize, column: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("diagonal dominance violated: entry ({row}, {col}) of the average confusion matrix ({value:.6}) is not smaller than the diagonal ({diagonal:.6})")]
    DominanceViolated {
        row: usize,
        col: usize,
        value: f64,
        diagonal: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
