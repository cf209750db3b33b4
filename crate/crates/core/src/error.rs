use thiserror::Error;

use crate::graph::Graph;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be >= 1 and rank >= 1")]
    InvalidShape(Vec<usize>),

    #[error("expected a rank-{expected} tensor, got shape {actual:?}")]
    Rank { expected: usize, actual: Vec<usize> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dtype mismatch: expected {expected}, got {actual}")]
    DType { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("quantization parameters invalid: {0}")]
    QuantParams(String),

    #[error("block pattern violation at block row {block_row}, column {col}")]
    PatternViolation { block_row: usize, col: usize },

    #[error("missing bias for post-op {0}")]
    MissingBias(String),

    #[error("no calibration statistics for edge `{0}`")]
    CalibrationCoverage(String),

    #[error("graph is invalid: {0}")]
    InvalidGraph(String),

    #[error("execution failed at node `{node}`: {reason}")]
    Execution { node: String, reason: String },

    #[error("accuracy-aware tuning failed: best score {best_score} < threshold {threshold}")]
    TuningFailed {
        best: Box<Graph>,
        best_score: f64,
        threshold: f64,
    },

    #[error("invalid allocation size {0}")]
    InvalidSize(usize),

    #[error("allocator invariant violated: {0}")]
    Allocator(String),

    #[error("weight `{0}` cannot be resolved")]
    Binding(String),

    #[error("unsupported bundle version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bundle checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("bundle truncated: {0}")]
    Truncated(String),

    #[error("corrupt bundle: {0}")]
    Corrupt(String),

    #[error("graph topologies differ: {0}")]
    TopologyMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn exec(node: &str, reason: impl Into<String>) -> Self {
        Error::Execution {
            node: node.to_string(),
            reason: reason.into(),
        }
    }
}
