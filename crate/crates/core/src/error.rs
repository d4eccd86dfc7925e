use thiserror::Error;

#[derive(Debug, Error)]
pub enum AbnnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("forward called on a Bayesian layer with no sampled weights")]
    NoSample,

    #[error("training phase requires {0}")]
    Freeze(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty score set: {0}")]
    EmptySet(&'static str),

    #[error("idx parse error: {0}")]
    Idx(#[from] IdxError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures specific to the IDX container format.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

pub type Result<T> = std::result::Result<T, AbnnError>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> AbnnError {
    AbnnError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
