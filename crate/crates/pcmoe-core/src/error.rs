//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, forwards, swapping and planning.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes, e.g. a matrix-vector product between a
    /// 2x3 matrix and a 4-vector. Both shapes are spelled out.
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Softmax over a vector whose entries are all masked out.
    #[error("softmax: no unmasked logits")]
    NoUnmaskedLogits,

    /// An index or count argument outside its valid range.
    #[error("{op}: {what} = {value} outside [{min}, {max}]")]
    OutOfRange {
        op: &'static str,
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    /// A stored expert magnitude disagrees with the recomputed value, which
    /// means the model file is corrupt.
    #[error(
        "corrupt model: expert ({layer}, {expert}) cached magnitude {cached} \
         differs from recomputed {recomputed}"
    )]
    MagnitudeCacheMismatch {
        layer: usize,
        expert: usize,
        cached: f64,
        recomputed: f64,
    },

    /// Structural validation failure (inconsistent dimensions, empty inputs,
    /// non-finite weights and the like).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
