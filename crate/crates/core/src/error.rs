use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    /// An input lies outside the mathematical domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Input too close to a singular configuration (e.g. a near-zero vector).
    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A sampler was asked for more classes or samples than exist.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A contrastive anchor has no positives; enable augmentation views.
    #[error("degenerate episode: {0}")]
    DegenerateEpisode(String),

    #[error("format error: {0}")]
    Format(String),

    /// A non-finite value was produced during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
