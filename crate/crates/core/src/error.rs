use thiserror::Error;

use crate::pipelines::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid mechanism, layout, or graph description.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular configuration: zero pivot at index {pivot} ({context})")]
    SingularConfiguration { pivot: usize, context: &'static str },

    #[error("bad dof choice: [Phi_q; B] is singular at this configuration")]
    BadDofChoice,

    #[error("position problem diverged after {iterations} iterations (|Phi| = {residual:e})")]
    PositionProblemDiverged { iterations: usize, residual: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("factor {index} failed to evaluate: {source}")]
    Factor {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("rank-deficient Hessian; null directions: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("trajectory grids differ: {0}")]
    GridMismatch(String),

    #[error("forward simulation failed at step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
        /// Trajectory rows computed before the failure.
        prefix: Box<Trajectory>,
    },

    #[error("inverse dynamics stage {stage} failed: {source}")]
    StageFailed {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("projection onto the constraint manifold diverged at t = {0}")]
    ProjectionDiverged(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
