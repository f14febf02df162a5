use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    #[error("poisoned gradient for parameter `{0}`")]
    PoisonedGradient(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("split planning failed: {0}")]
    Planning(String),

    #[error("empty analytics input: {0}")]
    EmptyAnalytics(String),

    #[error("undefined similarity between `{0}` and `{1}` (zero frequency vector)")]
    UndefinedSimilarity(String, String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Truncation { len: usize, max: usize },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("missing run artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
