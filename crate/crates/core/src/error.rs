//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("division guard tripped in `{op}`: denominator magnitude below 1e-12")]
    DivisionGuard { op: &'static str },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("degenerate input: row {row} has L2 norm below 1e-12")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("numeric abort at step {step}: {detail}")]
    NumericAbort { step: usize, detail: String },

    #[error("insufficient data: needed {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 numeric abort,
    /// 4 incomplete comparison (set by the harness), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Contract(_) => 2,
            Error::NumericAbort { .. } | Error::NonFinite { .. } | Error::DivisionGuard { .. } => 3,
            _ => 1,
        }
    }
}
