//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("int32 accumulator overflow in layer {layer} ({kind})")]
    InternalOverflow { layer: usize, kind: String },

    #[error("gradient degenerate: {0}")]
    GradientDegenerate(String),

    #[error("no adversarial starting point found within {draws} uniform draws")]
    InitFailed { draws: usize },

    #[error("boundary not bracketed: segment endpoints classify identically")]
    BoundaryNotBracketed,

    #[error("undefined similarity: gradients are zero on every sample")]
    UndefinedSimilarity,

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape_mismatch(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericDomain(msg.into())
    }
}
