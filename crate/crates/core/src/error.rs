use std::path::PathBuf;

use thiserror::Error;

use crate::pcm::TransportPlan;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },

    #[error("tensor contains a non-finite entry")]
    NonFiniteInput,

    #[error("malformed .pmt header: {0}")]
    MalformedHeader(String),

    #[error("tensor dimensions overflow the addressable size")]
    DimOverflow,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("target dimension is zero")]
    ZeroTargetDim,

    #[error("requested rank {requested} exceeds min(rows, cols) = {max}")]
    RankTooLarge { requested: usize, max: usize },

    #[error("mask has no foreground pixels")]
    EmptyForeground,

    #[error("sinkhorn did not converge: marginal violation {violation:.3e} after {iterations} sweeps")]
    NonConvergence {
        violation: f64,
        iterations: usize,
        plan: Box<TransportPlan>,
    },

    #[error("degenerate marginal: {0}")]
    DegenerateMarginal(String),

    #[error("similarity scores are not finite")]
    DegenerateScores,

    #[error("class {0} has no centroids in memory")]
    MissingMemoryClass(usize),

    #[error("kernel size {0} is even; an odd size is required")]
    EvenKernel(usize),

    #[error("P and G are both empty; dice is undefined")]
    EmptyUnion,

    #[error("loss component {0} is not finite")]
    NonFiniteComponent(&'static str),

    #[error("input dims {dims:?} not divisible by total stride {stride}")]
    IndivisibleDims { dims: Vec<usize>, stride: usize },

    #[error("non-differentiable point: {0}")]
    NonDifferentiablePoint(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("scan is empty")]
    EmptyScan,

    #[error("non-finite loss at iteration {iteration} (episode dump: {dump:?})")]
    NonFiniteLoss {
        iteration: usize,
        dump: Option<PathBuf>,
    },

    #[error("no space left while writing {0}")]
    DiskFull(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimMismatch {
            op,
            detail: detail.into(),
        }
    }
}
