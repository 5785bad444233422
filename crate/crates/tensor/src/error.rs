use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("normalization set is empty")]
    EmptyNormalization,
    #[error("no non-ignored targets in loss")]
    NoTargets,
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::Shape(msg.into())
}
