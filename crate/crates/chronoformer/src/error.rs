//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, names both operands.
    #[error("dimension mismatch in {op}: left shape {left:?} vs right shape {right:?}")]
    Dim {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Softmax over a row in which every key is masked out.
    #[error("empty attention row: all keys masked at row {row}")]
    EmptyAttentionRow { row: usize },

    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed corpus line; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// A forward pass produced a non-finite value; `op_tag` names the producing op.
    #[error("non-finite value produced by op '{op_tag}' (tape node {node})")]
    NonFinite { op_tag: &'static str, node: usize },

    #[error("training diverged at step {step}; last finite loss {last_loss}")]
    Divergence { step: usize, last_loss: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Importance-reweighted estimator hit a zero sampling probability.
    #[error("estimator undefined: {0}")]
    Estimator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
