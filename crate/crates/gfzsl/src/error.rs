use crate::dataset::ClassId;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A data or model file could not be parsed. `detail` names the line
    /// (text formats) or byte offset (binary format) where parsing failed.
    #[error("failed to load {path}: {detail}")]
    Load { path: String, detail: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that must be positive definite was found singular or
    /// indefinite during factorization.
    #[error("singular system: {0}")]
    Singular(String),

    #[error("unknown class id {0}")]
    UnknownClass(ClassId),

    #[error("class {0} has no examples")]
    EmptyClass(ClassId),

    #[error("bad model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
