use crate::tensor::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid configuration `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed data at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
