use alloc::string::String;

use thiserror::Error;

/// Failures inside a collective or its transport.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("rank {rank}: length mismatch, local {local} vs peer {peer} (from rank {from})")]
    LengthMismatch {
        rank: usize,
        from: usize,
        local: usize,
        peer: usize,
    },
    #[error("rank {rank}: buffer of {len} elements is not divisible by {n_ranks} ranks")]
    NotDivisible {
        rank: usize,
        len: usize,
        n_ranks: usize,
    },
    #[error("broadcast root {root} out of range for {n_ranks} ranks")]
    RootOutOfRange { root: usize, n_ranks: usize },
    #[error("rank {rank}: expected {expected} frame from rank {from}, got {got}")]
    UnexpectedFrame {
        rank: usize,
        from: usize,
        expected: &'static str,
        got: &'static str,
    },
    #[error("rank {rank}: sequence gap from rank {from}, expected {expected} got {got}")]
    Sequence {
        rank: usize,
        from: usize,
        expected: u32,
        got: u32,
    },
    #[error("rank {rank}: transport failure: {reason}")]
    Transport { rank: usize, reason: String },
    #[error("lockstep engine stalled with {pending} ranks still waiting")]
    Deadlock { pending: usize },
}

/// Invalid configuration caught before any rank starts.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("bucket capacity must be at least 1 element")]
    ZeroBucket,
    #[error("batch of {batch} samples does not split evenly over {n_ranks} ranks")]
    BatchNotDivisible { batch: usize, n_ranks: usize },
    #[error("{0}")]
    Invalid(String),
}

/// A NaN or infinity surfaced in training tensors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("non-finite {what} at index {index} (batch starting at sample {batch_start})")]
    Model {
        what: &'static str,
        index: usize,
        batch_start: usize,
    },
    #[error("non-finite gradient at flat index {index}")]
    Gradient { index: usize },
    #[error("master parameter {value} at flat index {index} overflows fp16")]
    HalfOverflow { index: usize, value: f32 },
}

/// Any error raised by a training step.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
