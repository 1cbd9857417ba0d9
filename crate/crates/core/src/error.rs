use std::io;

use thiserror::Error;

use crate::simulate::PatternField;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("no positive equilibrium found: {0}")]
    NoEquilibrium(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("simulation diverged at t = {time} after {halvings} step halvings")]
    SimulationFailure {
        time: f64,
        halvings: u32,
        last_state: Box<PatternField>,
    },

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }
}
