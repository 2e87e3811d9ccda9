use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Partial integration state carried by [`Error::NonConvergence`].
#[derive(Debug, Clone)]
pub struct PartialSolve {
    pub t: f64,
    pub h: f64,
    pub z: Tensor,
    pub delta_logp: Tensor,
    pub nfe: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value {value} at index {index} produced by {op}")]
    NonFinite { op: &'static str, index: usize, value: f64 },

    #[error("node {0} is not on this tape")]
    NotOnTape(usize),

    #[error("exact trace requested for D = {dim}, above the cap of {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("solver did not reach the end time: stopped at t = {}, step {}", .0.t, .0.h)]
    NonConvergence(Box<PartialSolve>),

    #[error("numerical blow-up at t = {t}")]
    NumericalBlowup { t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint {0} is corrupt: {1}")]
    Corrupt(PathBuf, String),

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("run directory {0} has no metrics rows")]
    EmptyRun(PathBuf),

    #[error("iteration {iteration}: {source}")]
    Iteration { iteration: u64, source: Box<Error> },

    #[error("batch of {batch} samples: {source}")]
    Batch { batch: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { path: path.into(), message: message.into() }
    }
}
