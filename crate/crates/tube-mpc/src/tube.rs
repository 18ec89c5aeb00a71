//! Disturbance tubes: how far the real trajectory can drift from a nominal
//! prediction, and how much the constraint boxes must shrink to absorb it.
//!
//! With a per-step growth factor `lambda` and per-step disturbance radius
//! `eta`, the deviation after `m` same-input steps obeys
//!
//! ```text
//! |e(m)| <= (lambda^(m-1) + ... + lambda + 1) eta
//! ```
//!
//! The growth factor used operationally is certified against the plant: it
//! dominates the spectral radius and 2-norm of the discrete `A` as well as
//! the region-wide bound `1 + dt l1`, so the geometric sum above is a true
//! worst-case envelope for the one-step-Lipschitz recursion.

use thiserror::Error;

use crate::gains::spectral_radius;
use crate::plant::Bounds;
use crate::{GainMat, StateMat, StateVec, NU, NX};

#[derive(Debug, Error, PartialEq)]
pub enum TubeError {
    #[error("tightened state box is empty at step {step}, coordinate {coord}")]
    StateBoxInfeasible { step: usize, coord: usize },
    #[error("tightened input box is empty at coordinate {coord}")]
    InputBoxInfeasible { coord: usize },
    #[error("{0} must be nonnegative and finite")]
    BadArgument(&'static str),
}

/// Worst-case deviation after `m` steps: `eta * sum_{j<m} lambda^j`.
pub fn deviation_bound(lambda: f64, m: usize, eta: f64) -> f64 {
    let mut acc = 0.0;
    let mut pow = 1.0;
    for _ in 0..m {
        acc += pow;
        pow *= lambda;
    }
    acc * eta
}

/// Spectral radius of the one-step matrix.
pub fn max_eigenvalue_modulus(a: &StateMat) -> f64 {
    spectral_radius(&nalgebra::DMatrix::from_fn(NX, NX, |i, j| a[(i, j)]))
}

/// Certified per-step growth factor for the deviation recursion: dominates
/// the spectral radius (asymptotics), the induced 2-norm of `A` (one
/// anchor-exact step), and `1 + dt l1` (any point of the admissible region).
pub fn growth_factor(a: &StateMat, l1: f64, dt: f64) -> f64 {
    let rho = max_eigenvalue_modulus(a);
    let norm = a.svd(false, false).singular_values[0];
    rho.max(norm).max(1.0 + dt * l1)
}

/// Ball of states the real system can occupy around a nominal prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbedStateSet {
    pub center: StateVec,
    pub radius: f64,
}

impl DisturbedStateSet {
    pub fn new(center: StateVec, radius: f64) -> Result<Self, TubeError> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(TubeError::BadArgument("radius"));
        }
        Ok(Self { center, radius })
    }

    /// Ball around an `m`-step prediction from the given center.
    pub fn after_steps(center: StateVec, lambda: f64, m: usize, eta: f64) -> Result<Self, TubeError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(TubeError::BadArgument("lambda"));
        }
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(TubeError::BadArgument("eta"));
        }
        Self::new(center, deviation_bound(lambda, m, eta))
    }

    pub fn contains(&self, x: &StateVec) -> bool {
        (x - self.center).norm() <= self.radius
    }
}

/// State box for prediction step `i`, every constrained coordinate moved
/// inward by `i * eta * (1 + l)^i`.
pub fn tighten_state_box(
    state_box: &Bounds<NX>,
    step: usize,
    eta: f64,
    l: f64,
) -> Result<Bounds<NX>, TubeError> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(TubeError::BadArgument("eta"));
    }
    if !(l.is_finite() && l >= 0.0) {
        return Err(TubeError::BadArgument("l"));
    }
    let margin = step as f64 * eta * (1.0 + l).powi(step as i32);
    let mut out = state_box.clone();
    for i in 0..NX {
        if out.lower[i].is_finite() {
            out.lower[i] += margin;
        }
        if out.upper[i].is_finite() {
            out.upper[i] -= margin;
        }
        if out.lower[i] > out.upper[i] {
            return Err(TubeError::StateBoxInfeasible { step, coord: i });
        }
    }
    Ok(out)
}

/// Input box with `|K|_2 * tube_radius` removed from each side, reserving
/// authority for the ancillary feedback correction.
pub fn tighten_input_box(
    input_box: &Bounds<NU>,
    k: &GainMat,
    tube_radius: f64,
) -> Result<Bounds<NU>, TubeError> {
    if !(tube_radius.is_finite() && tube_radius >= 0.0) {
        return Err(TubeError::BadArgument("tube_radius"));
    }
    let k_norm = k.svd(false, false).singular_values[0];
    let margin = k_norm * tube_radius;
    let mut out = input_box.clone();
    for i in 0..NU {
        if out.lower[i].is_finite() {
            out.lower[i] += margin;
        }
        if out.upper[i].is_finite() {
            out.upper[i] -= margin;
        }
        if out.lower[i] > out.upper[i] {
            return Err(TubeError::InputBoxInfeasible { coord: i });
        }
    }
    Ok(out)
}

/// How the state-box margins grow along the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeSettings {
    /// Per-step disturbance radius used for state-box margins.
    pub eta_state: f64,
    /// Growth exponent base offset in `i * eta * (1+l)^i`.
    pub l_state: f64,
    /// Deviation radius reserved for the feedback correction on inputs.
    pub handoff_radius: f64,
}

/// Per-step tightening data for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeProfile {
    pub lambda: f64,
    /// Total per-step disturbance radius backing `radii`.
    pub eta: f64,
    /// Deviation radii, `radii[i] = deviation_bound(lambda, i, eta)`.
    pub radii: Vec<f64>,
    /// Tightened state boxes per step, index 0 (untightened) to N.
    pub state_boxes: Vec<Bounds<NX>>,
    pub input_box: Bounds<NU>,
}

impl TubeProfile {
    pub fn build(
        lambda: f64,
        eta: f64,
        horizon: usize,
        state_box: &Bounds<NX>,
        input_box: &Bounds<NU>,
        k: &GainMat,
        settings: &TubeSettings,
    ) -> Result<Self, TubeError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(TubeError::BadArgument("lambda"));
        }
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(TubeError::BadArgument("eta"));
        }
        let mut radii = Vec::with_capacity(horizon + 1);
        let mut state_boxes = Vec::with_capacity(horizon + 1);
        for i in 0..=horizon {
            radii.push(deviation_bound(lambda, i, eta));
            state_boxes.push(tighten_state_box(
                state_box,
                i,
                settings.eta_state,
                settings.l_state,
            )?);
        }
        let input_box = tighten_input_box(input_box, k, settings.handoff_radius)?;
        Ok(Self {
            lambda,
            eta,
            radii,
            state_boxes,
            input_box,
        })
    }
}
