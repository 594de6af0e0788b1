use thiserror::Error;

use crate::geometry::GeometryError;
use crate::harness::HarnessError;
use crate::lateral::MpecError;
use crate::longitudinal::LongitudinalError;
use crate::ovsim::ProfileError;
use crate::qp::QpError;
use crate::uncertainty::UncertaintyError;
use crate::vehicle::ModelError;

/// Umbrella error for callers that drive several subsystems at once.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Mpec(#[from] MpecError),
    #[error(transparent)]
    Longitudinal(#[from] LongitudinalError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}
