use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;
use crate::scheduler::Infeasible;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("{0}")]
    Infeasible(Infeasible),

    #[error("invalid week data ({} violations, first: {})", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidData(Vec<Violation>),

    #[error("invalid schedule ({} violations, first: {})", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidSchedule(Vec<Violation>),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    TrainingDiverged { epoch: usize, batch: usize, loss: f64 },

    #[error("model load error: {0}")]
    ModelLoad(String),

    #[error("simulation aborted at slot {slot}: {msg}")]
    Simulation { slot: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
