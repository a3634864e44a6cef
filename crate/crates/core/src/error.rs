use thiserror::Error;

use crate::diagnostics::MetricTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not on the unit sphere (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular linear system")]
    Singular,

    #[error("equilibrium undefined: lambda + sum f_n^2 = 0")]
    DegenerateEquilibrium,

    #[error("csv row {row}: {reason}")]
    CsvRow { row: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("flow aborted at t = {t}: {reason}")]
    FlowAborted {
        t: f64,
        reason: String,
        trace: Box<MetricTrace>,
    },

    #[error("training aborted at step {step}: {reason}\n{dump}")]
    TrainAborted { step: usize, reason: String, dump: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
