use thiserror::Error;

/// Every failure the laboratory can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },

    #[error("loss is not finite ({value})")]
    NonFiniteLoss { value: f64 },

    #[error("attention row {row} sums to {sum}, expected 1")]
    Unnormalized { row: usize, sum: f64 },

    #[error("runs are not comparable: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
