use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not conform to an op's broadcasting or kernel rules.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A hyperparameter is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A caller broke an API contract (non-scalar backward root, bad custom gradient, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: u64, detail: String },

    #[error("checkpoint integrity error at byte {offset}: {detail}")]
    Integrity { offset: usize, detail: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    /// Malformed tabular input; `line` is 1-based and counts the header.
    #[error("parse error on line {line}: {detail}")]
    Parse { line: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
