use thiserror::Error;

use crate::multilevel::{EstimateReport, LadderTrace};
use crate::vector::ShiftVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no survivor in the batch")]
    NoSurvivors,

    /// The Newton solve hit its iteration cap. `best` is the lowest-objective iterate seen.
    #[error("shift solver did not converge in {max_iter} iterations (|grad u| = {grad_norm:e})")]
    NotConverged {
        max_iter: usize,
        grad_norm: f64,
        best: ShiftVector,
    },

    #[error("simulator failure on points {indices:?}: {message}")]
    Simulator { indices: Vec<usize>, message: String },

    #[error("degenerate batch: all {n} responses equal {value} and lie below the threshold")]
    DegenerateBatch { n: usize, value: f64 },

    #[error("ladder stalled after {} levels", .trace.levels.len())]
    MaxLevelsExceeded { trace: Box<LadderTrace> },

    #[error("no weighted survivor among {runs} final-phase runs")]
    ZeroHits { runs: usize },

    #[error("run budget exhausted before the precision target was met")]
    BudgetExhausted { partial: Box<EstimateReport> },

    #[error("degenerate stratum [{lower}, {upper}): probability underflows")]
    DegenerateStratum { lower: f64, upper: f64 },

    #[error("config error in {field}: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
