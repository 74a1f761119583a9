//! Planning and disturbance-rejecting control for a quadrotor carrying a
//! cable-suspended payload.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: parameters, state, disturbed taut-cable dynamics, rotor model, RK4.
//! - [`flatness`]: payload trajectory + yaw to full state, inputs and bubble geometry.
//! - [`esdf`]: occupancy grids, signed distance fields and trilinear queries.
//! - [`numopt`]: L-BFGS, smooth penalties, Huber loss, gradient checking.
//! - [`minco`]: degree-7 minimum-snap splines with gradient back-propagation.
//! - [`kinodynamic`]: kinodynamic A* front-end over payload primitives.
//! - [`planner`]: spatio-temporal trajectory optimization and feasibility audit.
//! - [`nmpc`]: real-time-iteration NMPC over the disturbed model.
//! - [`estimator`]: sliding-window external force estimation.
//! - [`indi`]: INDI angular-rate loop, Butterworth filtering, rotor allocation.
//! - [`sim`]: deterministic closed-loop simulator and tracking metrics.
//! - [`scenario`] and [`bench`]: scenario files, instance generators and the
//!   command implementations behind the CLI.

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod esdf;
pub mod estimator;
pub mod flatness;
pub mod indi;
pub mod kinodynamic;
pub mod minco;
pub mod nmpc;
pub mod numopt;
pub mod planner;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// World z axis (up).
pub fn e_z() -> Vec3 {
    Vec3::new(0.0, 0.0, 1.0)
}
