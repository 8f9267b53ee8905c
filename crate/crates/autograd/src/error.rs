use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("l2-normalize: row {row} has zero or non-finite norm")]
    ZeroNorm { row: usize },

    #[error("{op}: invalid argument: {reason}")]
    Argument { op: &'static str, reason: String },

    #[error("backward: loss must hold a single value, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: loss is not connected to any tensor that requires grad")]
    Disconnected,
}

pub type Result<T> = std::result::Result<T, TensorError>;
