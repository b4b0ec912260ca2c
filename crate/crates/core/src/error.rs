use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("unknown anchor id {0}")]
    UnknownAnchor(u32),

    #[error("degenerate anchor geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient constraints: {0}")]
    InsufficientConstraints(String),

    /// The solver hit its iteration cap; the best iterate is attached.
    #[error("no convergence after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        estimate: Vector3<f64>,
        covariance: Matrix3<f64>,
    },

    #[error("invalid time step {0}")]
    InvalidTimestep(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("noise model is not positive definite")]
    BadNoiseModel,

    #[error("normal equations are singular even at lambda = {lambda:e}")]
    SingularSystem { lambda: f64 },

    #[error("keyframe time {t} is not after the last keyframe at {last}")]
    OutOfOrder { t: f64, last: f64 },

    #[error("infeasible trajectory: {0}")]
    InfeasibleTrajectory(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("invalid override `{0}`")]
    Override(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("toml: {0}")]
    Toml(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, FusionError>;
