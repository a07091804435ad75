//! Event-triggered CBF/CLF-QP lane-change control for mixed traffic.
//!
//! The numerical core (vehicle models, constraint rows, robust bounds, QP
//! solver) is generic over [`Scalar`] (`f32` or `f64`). The controller and
//! simulator run in `f64`; the aliases below name the common concrete types.

pub mod barrier;
pub mod controller;
pub mod error;
pub mod interval;
pub mod policy;
pub mod qp;
pub mod robust;
pub mod scalar;
pub mod scenario;
pub mod sim;
pub mod vehicle;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type State = vehicle::VehicleState<f64>;
pub type Control = vehicle::ControlInput<f64>;
pub type Row = barrier::ConstraintRow<f64>;
pub type Problem = qp::QpProblem<f64>;
pub type Solution = qp::QpSolution<f64>;
pub type Bounds = robust::BoundVectors<f64>;
pub type Uncertainty = robust::UncertaintyBox<f64>;
