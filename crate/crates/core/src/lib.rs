//! Prioritized execution of extended set-based (ESB) robot tasks.
//!
//! Tasks are encoded as control barrier functions `h(σ, t)` whose zero
//! superlevel set must be rendered forward invariant and asymptotically
//! stable. A stack of such tasks is executed by solving, at every control
//! step, a small convex quadratic program whose task constraints are relaxed
//! by slack variables; priorities are imposed through linear inequalities on
//! those slacks.
//!
//! The crate is organized bottom-up:
//!
//! * [`manipulator`] planar serial chains (and a Cartesian point robot):
//!   forward kinematics, task Jacobians, Lagrangian dynamics.
//! * [`tasks`] CBF task definitions, gradients, auxiliary CBFs for relative
//!   degree two and the pairwise relationship classifier.
//! * [`qp`] dense strictly convex QP solver, KKT residuals and the closed
//!   form KKT solutions used as verification oracles.
//! * [`priority`] prioritization matrices, assembly of the controller QPs,
//!   smooth stack switching, integral CBF torque bounds and offline gain
//!   selection.
//! * [`sim`] deterministic closed-loop simulation with Lyapunov and
//!   active-set diagnostics.
//! * [`scenario`] JSON scenario schema, built-in scenarios and trace output.
//! * [`acceptance`] the end-to-end checks driven by `esb verify`.

pub mod acceptance;
pub mod error;
pub mod linalg;
pub mod manipulator;
pub mod priority;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod tasks;

pub use error::{Error, Result};

/// Dense column vector used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
