use std::fmt;

/// Errors raised by the tensor engine, layers, pipeline and tooling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("out of memory: failed to allocate {bytes} bytes")]
    OutOfMemory { bytes: usize },
    #[error("token id {id} out of range (limit {limit})")]
    TokenRange { id: usize, limit: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("decode schedule violated: {0}")]
    Schedule(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl fmt::Display) -> Self {
        Error::Invalid { op, reason: reason.to_string() }
    }
}
