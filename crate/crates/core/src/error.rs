use thiserror::Error;

/// Errors raised by tensor operations, the tape, and the layers built on them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: non-finite value in input")]
    NonFiniteInput { op: &'static str },
    #[error("mask row {row} of batch element {batch} forbids every position")]
    FullyMasked { batch: usize, row: usize },
    #[error("{op}: every position is ignored, mean is undefined")]
    EmptyMean { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
