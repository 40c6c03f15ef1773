use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),

    #[error("invalid {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    /// The damped velocity Hessian cannot be inverted meaningfully.
    #[error("singular generalized dynamics (condition estimate {cond:.3e})")]
    SingularDynamics { cond: f64 },

    /// The innovation covariance of a filter update is numerically unusable.
    #[error("ill-conditioned filter update (condition estimate {cond:.3e})")]
    IllConditionedUpdate { cond: f64 },

    #[error("integration blew up: {stage}")]
    IntegrationBlowup { stage: &'static str },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// Evaluation curves cannot be compared because their step grids differ.
    #[error("misaligned evaluation grids: {0}")]
    MisalignedCurves(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics file error: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            detail: detail.into(),
        }
    }
}
