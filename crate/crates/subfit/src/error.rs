//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{what} did not converge within {iters} iterations")]
    NonConvergence { what: &'static str, iters: usize },

    #[error("rank-deficient input: |R[{index},{index}]| = {value:.3e} below threshold")]
    RankDeficient { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite artifact for `{phase}`: {path} (run `{hint}` first)")]
    MissingArtifact {
        phase: &'static str,
        path: PathBuf,
        hint: &'static str,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code per error class: 2 for configuration problems,
    /// 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::MissingArtifact { .. } => 2,
            Error::NonConvergence { .. }
            | Error::RankDeficient { .. }
            | Error::NonFinite(_)
            | Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
