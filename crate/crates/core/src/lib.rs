//! Game-theoretic predictive overtaking control.
//!
//! The lateral controller solves a leader/follower game between the ego vehicle
//! and the overtaken vehicle as a single-level program with the follower's
//! optimality conditions embedded. The longitudinal controller is a
//! chance-constrained MPC whose disturbance variance comes from a fitted
//! driver-response model. [`harness`] wires both into a closed loop.

// Negated comparisons double as NaN rejection; index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod error;
pub mod geometry;
pub mod harness;
pub mod lateral;
pub mod longitudinal;
pub mod ovsim;
pub mod qp;
pub mod uncertainty;
pub mod vehicle;

pub use error::Error;
pub use geometry::{BoundaryLine, OccupancyParams, Phase};
pub use harness::{Metrics, ScenarioConfig, TraceLog};
pub use lateral::{LateralController, LateralOutput, MpecProblem, MpecSolution};
pub use longitudinal::{GaussianMoments, LongitudinalController, Risk};
pub use ovsim::{OvBehavior, OvMode, SpeedProfile};
pub use qp::{DenseQp, QpSolution, QpStatus};
pub use uncertainty::VarianceCurve;
pub use vehicle::{ControlInput, SimParams, WorldState};
