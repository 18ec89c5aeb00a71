//! Tube-based model predictive control for a planar three-link arm.
//!
//! The library is organized bottom-up:
//!
//! * [`plant`] — arm kinematics, admissible boxes, Euler stepping, Lipschitz data
//! * [`linearize`] — Jacobians, discretization, certified linearization error budget
//! * [`gains`] — discrete Riccati synthesis, terminal weight/radius machinery
//! * [`tube`] — disturbance propagation bounds and constraint tightening
//! * [`solver`] — dense ADMM quadratic program solver plus an SQP wrapper
//! * [`ocp`] — horizon cost and the condensed optimal control problem builders
//! * [`controllers`] — solve-ahead, delayed, and zero-delay MPC variants
//! * [`sim`] — deterministic virtual-time closed loop, traces and metrics
//! * [`config`] — plain-text run configuration
//!
//! All state vectors are ordered `(x, y, theta1, theta2, theta3)`; inputs are
//! the three joint rates `(omega1, omega2, omega3)`.

pub mod config;
pub mod controllers;
pub mod gains;
pub mod linearize;
pub mod ocp;
pub mod plant;
pub mod sim;
pub mod solver;
pub mod tube;

use nalgebra::{SMatrix, SVector};

/// State dimension: end-effector position plus three absolute joint angles.
pub const NX: usize = 5;
/// Input dimension: three joint angular rates.
pub const NU: usize = 3;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;
pub type StateMat = SMatrix<f64, NX, NX>;
pub type InputMat = SMatrix<f64, NX, NU>;
pub type GainMat = SMatrix<f64, NU, NX>;

/// Coordinate indices into a [`StateVec`].
pub mod idx {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const TH1: usize = 2;
    pub const TH2: usize = 3;
    pub const TH3: usize = 4;
    /// Indices of the box-constrained coordinates (the joint angles).
    pub const ANGLES: [usize; 3] = [TH1, TH2, TH3];
}
