use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {left} vs {right} in {op}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Observation layout does not match the declared clip/frame/object grid.
    #[error("layout error: {0}")]
    Layout(String),

    /// Pooling schedule violates the shrink/expand shape.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// A file does not carry the expected magic or version.
    #[error("format error: {0}")]
    Format(String),

    /// A blob or record is shorter than its header claims.
    #[error("corrupt data at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },

    /// Token id outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Invalid dataset generation spec.
    #[error("spec error: {0}")]
    Spec(String),

    /// Checkpoint incompatible with the requested configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss term became non-finite during training.
    #[error("non-finite loss at iteration {iteration}: term {term}")]
    NanLoss { iteration: usize, term: &'static str },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
