//! Model fitting: a limited-memory quasi-Newton minimizer, the palate fit
//! against a traced point cloud, and per-frame tongue tracking.

mod lbfgs;
mod palate;
mod tongue;

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::models::ModelError;

pub use lbfgs::{minimize, Minimum, SolverOptions};
pub use palate::{fit_palate, PalateFit};
pub use tongue::{
    objective_gradient_check, track_frame, FrameDiagnostics, TongueObjective, TrackOutput, Tracker, TrackerConfig,
    TrackerState,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("objective or gradient is not finite")]
    NonFiniteObjective,
    #[error("palate trace is empty")]
    EmptyTrace,
    #[error("model has no weights to fit")]
    DegenerateModel,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
