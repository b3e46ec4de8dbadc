use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("degenerate softmax: axis {axis} has extent 0")]
    DegenerateSoftmax { axis: usize },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("layer norm division by zero: last-axis extent 1 with eps = 0")]
    LayerNormDivisionByZero,
    #[error("distribution does not sum to 1 (sum = {sum})")]
    NotNormalized { sum: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, extent: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
