use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum NtcError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("Blahut-Arimoto did not converge after {iterations} iterations (gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },

    #[error("degenerate covariance: rank {rank} < dimension {dim}")]
    DegenerateCovariance { rank: usize, dim: usize },

    #[error("pmf support too large: {size} symbols (limit {limit})")]
    SupportOverflow { size: usize, limit: usize },

    #[error("symbol {symbol} outside pmf support [{lo}, {hi}]")]
    SymbolOutOfSupport { symbol: i64, lo: i64, hi: i64 },

    #[error("corrupt bitstream: {0}")]
    CorruptStream(String),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NtcError>;

impl NtcError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NtcError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        NtcError::Domain {
            op,
            detail: detail.into(),
        }
    }
}
