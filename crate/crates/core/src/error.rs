use std::path::PathBuf;

use thiserror::Error;

use crate::dynamics::Coord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),

    #[error("move map: {0}")]
    InvalidMoveMap(String),

    #[error("control ({}, {}) is not in the control set", .0.x, .0.y)]
    InvalidControl(Coord),

    #[error("state {0} is outside the state space")]
    InvalidState(String),

    #[error("invalid benchmark: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("discount factor {0} must lie in (0, 1)")]
    Discount(f64),

    #[error("singular system: denominator {0:e}")]
    Singular(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no feasible patch side: {0}")]
    Infeasible(String),

    #[error("image ingestion failed for {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("not enough distinct patches: need {needed}, have {available}")]
    NotEnoughPatches { needed: usize, available: usize },

    #[error("solver hit the iteration limit ({iterations}) at relative residual {residual:e}")]
    IterationLimit {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("fitted value iteration failed at period {period}: relative residual {residual:e} after {iterations} iterations")]
    FitFailed {
        period: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("{0}")]
    Unsupported(String),

    #[error("bad container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
