//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quantization group is empty")]
    EmptyGroup,

    #[error("bit width {0} outside supported range 1..=8")]
    InvalidBits(u8),

    #[error("non-finite value {0} in quantization input")]
    NonFinite(f64),

    #[error("packed code buffer has {actual} bytes, expected {expected} for {len} codes at {bits} bits")]
    CorruptPack {
        expected: usize,
        actual: usize,
        len: usize,
        bits: u8,
    },

    #[error("subspace rank {rank} invalid for dimension {dim} (need 1 <= rank <= dim)")]
    InvalidRank { rank: usize, dim: usize },

    #[error("input matrix is empty")]
    EmptyMatrix,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("block size {block} does not divide dimension {dim}")]
    BlockMismatch { block: usize, dim: usize },

    #[error("regularization weight must be nonnegative, got {0}")]
    NegativeLambda(f64),

    #[error("trailing block is numerically singular (condition estimate {cond:.3e})")]
    SingularBlock { cond: f64 },

    #[error("matrix is not symmetric (residual {0:.3e})")]
    NotSymmetric(f64),

    #[error("linear system is singular")]
    SingularSystem,

    #[error("matrix inversion failed")]
    InversionFailed,

    #[error("rotary embedding needs an even dimension, got {0}")]
    OddDimension(usize),

    #[error("cache config violates `{constraint}`: {detail}")]
    ConfigInvariant {
        constraint: &'static str,
        detail: String,
    },

    #[error("attention over an empty cache")]
    EmptyAttention,

    #[error("blob {path} has {actual} bytes, expected {expected}")]
    BlobSize {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error("manifest invalid: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
