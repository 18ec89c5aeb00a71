//! Planar three-link arm with absolute joint angles.
//!
//! The model state is `(x, y, theta1, theta2, theta3)` where `(x, y)` is the
//! end-effector position and the angles are measured from the positive x axis
//! (absolute, not relative). Inputs are the joint rates. The continuous-time
//! dynamics are
//!
//! ```text
//! xdot = -l1 sin(th1) w1 - l2 sin(th2) w2 - l3 sin(th3) w3
//! ydot =  l1 cos(th1) w1 + l2 cos(th2) w2 + l3 cos(th3) w3
//! thdot_i = w_i
//! ```
//!
//! stepped with forward Euler at a fixed control period. Disturbances enter
//! additively on the discrete step with a 2-norm bound `eta1`.

use nalgebra::SVector;
use thiserror::Error;

use crate::{idx, InputVec, StateVec, NU, NX};

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("link lengths must be positive and finite, got {0}")]
    BadLinkLength(f64),
    #[error("box lower bound exceeds upper bound at coordinate {0}")]
    EmptyBox(usize),
    #[error("disturbance bound eta1 must be finite and nonnegative, got {0}")]
    BadDisturbanceBound(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Axis-aligned box `{ v : lower <= v <= upper }`. Bounds may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<const D: usize> {
    pub lower: SVector<f64, D>,
    pub upper: SVector<f64, D>,
}

impl<const D: usize> Bounds<D> {
    pub fn new(lower: SVector<f64, D>, upper: SVector<f64, D>) -> Result<Self, PlantError> {
        for i in 0..D {
            if lower[i].is_nan() || upper[i].is_nan() {
                return Err(PlantError::NonFinite("box bound"));
            }
            if lower[i] > upper[i] {
                return Err(PlantError::EmptyBox(i));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Box with every coordinate free.
    pub fn unbounded() -> Self {
        Self {
            lower: SVector::repeat(f64::NEG_INFINITY),
            upper: SVector::repeat(f64::INFINITY),
        }
    }

    pub fn symmetric(half_width: SVector<f64, D>) -> Result<Self, PlantError> {
        Self::new(-half_width, half_width)
    }

    pub fn contains(&self, v: &SVector<f64, D>) -> bool {
        (0..D).all(|i| v[i] >= self.lower[i] && v[i] <= self.upper[i])
    }

    /// Membership with an absolute slack on each coordinate.
    pub fn contains_with_tol(&self, v: &SVector<f64, D>, tol: f64) -> bool {
        (0..D).all(|i| v[i] >= self.lower[i] - tol && v[i] <= self.upper[i] + tol)
    }

    /// Per-coordinate projection onto the box.
    pub fn clamp(&self, v: &SVector<f64, D>) -> SVector<f64, D> {
        SVector::from_fn(|i, _| v[i].clamp(self.lower[i], self.upper[i]))
    }

    /// Largest violation of the box over all coordinates (0 if inside).
    pub fn violation(&self, v: &SVector<f64, D>) -> f64 {
        (0..D).fold(0.0, |acc, i| {
            acc.max(self.lower[i] - v[i]).max(v[i] - self.upper[i])
        })
    }

    /// Max of |lower| and |upper| per coordinate; infinite bounds stay infinite.
    pub fn abs_max(&self) -> SVector<f64, D> {
        SVector::from_fn(|i, _| self.lower[i].abs().max(self.upper[i].abs()))
    }

    /// Move both bounds of coordinate `i` inward by `margin`.
    /// Fails with the coordinate index when the bounds cross.
    pub fn shrink_coord(&self, i: usize, margin: f64) -> Result<Self, usize> {
        let mut out = self.clone();
        out.lower[i] += margin;
        out.upper[i] -= margin;
        if out.lower[i] > out.upper[i] {
            return Err(i);
        }
        Ok(out)
    }
}

/// Physical and admissibility data for the arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmParams {
    pub link_lengths: [f64; 3],
    pub state_box: Bounds<NX>,
    pub input_box: Bounds<NU>,
    /// 2-norm bound on the additive per-step disturbance.
    pub eta1: f64,
}

impl ArmParams {
    pub fn new(
        link_lengths: [f64; 3],
        state_box: Bounds<NX>,
        input_box: Bounds<NU>,
        eta1: f64,
    ) -> Result<Self, PlantError> {
        for &l in &link_lengths {
            if !(l.is_finite() && l > 0.0) {
                return Err(PlantError::BadLinkLength(l));
            }
        }
        if !(eta1.is_finite() && eta1 >= 0.0) {
            return Err(PlantError::BadDisturbanceBound(eta1));
        }
        Ok(Self {
            link_lengths,
            state_box,
            input_box,
            eta1,
        })
    }

    /// Benchmark arm: links (sqrt 5, sqrt 5, sqrt 10), angle boxes
    /// [pi/2, pi] x [0, pi] x [0, pi/2], rate limit pi/16 on every joint,
    /// free end-effector coordinates.
    pub fn benchmark() -> Self {
        use std::f64::consts::{FRAC_PI_2, PI};
        let inf = f64::INFINITY;
        let state_box = Bounds::new(
            SVector::from([-inf, -inf, FRAC_PI_2, 0.0, 0.0]),
            SVector::from([inf, inf, PI, PI, FRAC_PI_2]),
        )
        .expect("static bounds");
        let w = PI / 16.0;
        let input_box = Bounds::symmetric(SVector::from([w, w, w])).expect("static bounds");
        Self::new([5f64.sqrt(), 5f64.sqrt(), 10f64.sqrt()], state_box, input_box, 0.01)
            .expect("static params")
    }

    /// Arm pose used to start the benchmark tasks; places the end effector
    /// at (0, 4) consistently with the joint angles.
    pub fn benchmark_initial_state() -> StateVec {
        use std::f64::consts::PI;
        let th1 = PI - 0.5f64.atan();
        let th2 = PI - 2f64.atan();
        let th3 = (1f64 / 3.0).atan();
        SVector::from([0.0, 4.0, th1, th2, th3])
    }

    /// End-effector position implied by joint angles alone.
    pub fn end_effector(&self, thetas: [f64; 3]) -> (f64, f64) {
        let mut x = 0.0;
        let mut y = 0.0;
        for (l, th) in self.link_lengths.iter().zip(thetas) {
            x += l * th.cos();
            y += l * th.sin();
        }
        (x, y)
    }

    /// Continuous-time state derivative.
    pub fn dynamics(&self, x: &StateVec, u: &InputVec) -> StateVec {
        let l = &self.link_lengths;
        let th = [x[idx::TH1], x[idx::TH2], x[idx::TH3]];
        let mut dx = 0.0;
        let mut dy = 0.0;
        for j in 0..3 {
            dx -= l[j] * th[j].sin() * u[j];
            dy += l[j] * th[j].cos() * u[j];
        }
        SVector::from([dx, dy, u[0], u[1], u[2]])
    }

    /// Forward Euler step of the nominal (disturbance-free) model.
    pub fn step_nominal(&self, x: &StateVec, u: &InputVec, dt: f64) -> StateVec {
        x + self.dynamics(x, u) * dt
    }

    /// Euler step with an additive disturbance on the successor state.
    pub fn step_real(&self, x: &StateVec, u: &InputVec, dt: f64, w: &StateVec) -> StateVec {
        self.step_nominal(x, u, dt) + w
    }

    /// Certified Lipschitz constants `(l1, l2)` of the continuous dynamics
    /// over `state box x input box`:
    /// `|f(x1,u1) - f(x2,u2)| <= l1 |x1-x2| + l2 |u1-u2|`.
    ///
    /// `l1` bounds the state Jacobian norm. Only the position rows depend on
    /// the state, through columns `l_j w_j (-cos th_j, -sin th_j)`, so
    /// `l1 = sqrt(sum_j (l_j wbar_j)^2)` with `wbar` from the input box; this
    /// holds for every angle value. `l2` bounds the input Jacobian norm; for
    /// a degenerate angle box it is evaluated exactly, otherwise via an
    /// interval Gershgorin bound on the Gram matrix of the Jacobian columns.
    pub fn lipschitz_constants(&self, state_box: &Bounds<NX>, input_box: &Bounds<NU>) -> (f64, f64) {
        let l = &self.link_lengths;
        let wbar = input_box.abs_max();
        let l1 = (0..3)
            .map(|j| (l[j] * wbar[j]).powi(2))
            .sum::<f64>()
            .sqrt();

        let lo = [state_box.lower[idx::TH1], state_box.lower[idx::TH2], state_box.lower[idx::TH3]];
        let hi = [state_box.upper[idx::TH1], state_box.upper[idx::TH2], state_box.upper[idx::TH3]];
        let degenerate = (0..3).all(|j| lo[j] == hi[j]);
        let l2 = if degenerate {
            let m = crate::linearize::input_jacobian(self, &[lo[0], lo[1], lo[2]]);
            m.svd(false, false).singular_values[0]
        } else {
            // Gram matrix G_ij = l_i l_j cos(th_i - th_j) + delta_ij per column
            // pair; bound |cos| over the interval of th_i - th_j and take the
            // worst Gershgorin row. Always >= the true sup of |df/du|.
            let mut worst_row = 0.0f64;
            for i in 0..3 {
                let mut row = 1.0 + l[i] * l[i];
                for j in 0..3 {
                    if j != i {
                        let dlo = lo[i] - hi[j];
                        let dhi = hi[i] - lo[j];
                        row += l[i] * l[j] * interval_abs_cos_max(dlo, dhi);
                    }
                }
                worst_row = worst_row.max(row);
            }
            worst_row.sqrt()
        };
        (l1, l2)
    }

    /// Upper bound on `|f(x, u)|` over the admissible boxes.
    pub fn speed_bound(&self) -> f64 {
        let wbar = self.input_box.abs_max();
        let planar: f64 = (0..3).map(|j| self.link_lengths[j] * wbar[j]).sum();
        (planar * planar + wbar.norm_squared()).sqrt()
    }

    /// Reject states or inputs carrying NaN/infinities before they enter the
    /// loop.
    pub fn check_finite(x: &StateVec, u: &InputVec) -> Result<(), PlantError> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(PlantError::NonFinite("state"));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(PlantError::NonFinite("input"));
        }
        Ok(())
    }
}

/// Max of |cos t| for t in [a, b].
fn interval_abs_cos_max(a: f64, b: f64) -> f64 {
    use std::f64::consts::PI;
    debug_assert!(a <= b);
    if b - a >= PI {
        return 1.0;
    }
    // |cos| attains 1 exactly at multiples of pi.
    let k = (a / PI).ceil();
    if k * PI <= b {
        return 1.0;
    }
    a.cos().abs().max(b.cos().abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_state(rng: &mut ChaCha8Rng, p: &ArmParams) -> StateVec {
        let b = &p.state_box;
        StateVec::from_fn(|i, _| {
            if b.lower[i].is_finite() && b.upper[i].is_finite() {
                rng.random_range(b.lower[i]..=b.upper[i])
            } else {
                rng.random_range(-5.0..5.0)
            }
        })
    }

    fn sample_input(rng: &mut ChaCha8Rng, p: &ArmParams) -> InputVec {
        let b = &p.input_box;
        InputVec::from_fn(|i, _| rng.random_range(b.lower[i]..=b.upper[i]))
    }

    #[test]
    fn benchmark_initial_pose_reaches_origin_column() {
        let p = ArmParams::benchmark();
        let x0 = ArmParams::benchmark_initial_state();
        let (ex, ey) = p.end_effector([x0[idx::TH1], x0[idx::TH2], x0[idx::TH3]]);
        assert_relative_eq!(ex, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ey, 4.0, epsilon = 1e-12);
        assert!(p.state_box.contains(&x0), "initial pose must be admissible");
    }

    #[test]
    fn dynamics_at_benchmark_pose() {
        // At the benchmark pose the link geometry is rational:
        // l_j (cos, sin) = (-2,1), (-1,2), (3,1). With w = (0.1, 0.1, 0.1)
        // the derivative is exactly (-0.4, 0, 0.1, 0.1, 0.1).
        let p = ArmParams::benchmark();
        let x0 = ArmParams::benchmark_initial_state();
        let u = InputVec::from([0.1, 0.1, 0.1]);
        let f = p.dynamics(&x0, &u);
        assert_relative_eq!(f[0], -0.4, epsilon = 1e-12);
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f[2], 0.1, epsilon = 1e-15);
        assert_relative_eq!(f[3], 0.1, epsilon = 1e-15);
        assert_relative_eq!(f[4], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn euler_step_matches_hand_computation() {
        let p = ArmParams::benchmark();
        let x0 = ArmParams::benchmark_initial_state();
        let u = InputVec::from([0.1, 0.1, 0.1]);
        let x1 = p.step_nominal(&x0, &u, 0.1);
        assert_relative_eq!(x1[0], 0.0 - 0.04, epsilon = 1e-12);
        assert_relative_eq!(x1[1], 4.0, epsilon = 1e-12);
        assert_relative_eq!(x1[2], x0[2] + 0.01, epsilon = 1e-15);
    }

    #[test]
    fn disturbance_enters_additively() {
        let p = ArmParams::benchmark();
        let x0 = ArmParams::benchmark_initial_state();
        let u = InputVec::from([0.05, -0.02, 0.0]);
        let w = StateVec::from([1e-3, -2e-3, 0.0, 5e-4, 0.0]);
        let real = p.step_real(&x0, &u, 0.1, &w);
        let nominal = p.step_nominal(&x0, &u, 0.1);
        assert_relative_eq!((real - nominal - w).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn angle_rows_are_exactly_the_inputs() {
        let p = ArmParams::benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = sample_state(&mut rng, &p);
            let u = sample_input(&mut rng, &p);
            let f = p.dynamics(&x, &u);
            assert_eq!(f[idx::TH1], u[0]);
            assert_eq!(f[idx::TH2], u[1]);
            assert_eq!(f[idx::TH3], u[2]);
        }
    }

    #[test]
    fn lipschitz_constants_dominate_sampled_quotients() {
        let p = ArmParams::benchmark();
        let (l1, l2) = p.lipschitz_constants(&p.state_box, &p.input_box);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let xa = sample_state(&mut rng, &p);
            let xb = sample_state(&mut rng, &p);
            let ua = sample_input(&mut rng, &p);
            let ub = sample_input(&mut rng, &p);
            let lhs = (p.dynamics(&xa, &ua) - p.dynamics(&xb, &ub)).norm();
            let rhs = l1 * (xa - xb).norm() + l2 * (ua - ub).norm();
            assert!(
                lhs <= rhs + 1e-12,
                "Lipschitz bound violated: {lhs} > {rhs}"
            );
        }
    }

    #[test]
    fn zero_input_box_gives_zero_state_lipschitz() {
        let p = ArmParams::benchmark();
        let frozen = Bounds::symmetric(InputVec::zeros()).unwrap();
        let (l1, _) = p.lipschitz_constants(&p.state_box, &frozen);
        assert_eq!(l1, 0.0);
    }

    #[test]
    fn degenerate_state_box_gives_exact_input_jacobian_norm() {
        let p = ArmParams::benchmark();
        let th = [2.0, 1.0, 0.5];
        let point = StateVec::from([0.0, 0.0, th[0], th[1], th[2]]);
        let state_box = Bounds::new(point, point).unwrap();
        let (_, l2) = p.lipschitz_constants(&state_box, &p.input_box);
        let m = crate::linearize::input_jacobian(&p, &th);
        assert_relative_eq!(l2, m.svd(false, false).singular_values[0], epsilon = 1e-12);
    }

    #[test]
    fn speed_bound_dominates_sampled_speeds() {
        let p = ArmParams::benchmark();
        let bound = p.speed_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10_000 {
            let x = sample_state(&mut rng, &p);
            let u = sample_input(&mut rng, &p);
            assert!(p.dynamics(&x, &u).norm() <= bound + 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let p = ArmParams::benchmark();
        assert!(matches!(
            ArmParams::new([0.0, 1.0, 1.0], p.state_box.clone(), p.input_box.clone(), 0.01),
            Err(PlantError::BadLinkLength(_))
        ));
        assert!(matches!(
            ArmParams::new(p.link_lengths, p.state_box.clone(), p.input_box.clone(), -1.0),
            Err(PlantError::BadDisturbanceBound(_))
        ));
        let bad = Bounds::new(SVector::from([1.0, 0.0, 0.0]), SVector::from([0.0, 1.0, 1.0]));
        assert_eq!(bad.unwrap_err(), PlantError::EmptyBox(0));
    }

    #[test]
    fn box_operations() {
        let b = Bounds::symmetric(SVector::from([1.0, 2.0])).unwrap();
        assert!(b.contains(&SVector::from([1.0, -2.0])));
        assert!(!b.contains(&SVector::from([1.1, 0.0])));
        assert_eq!(b.clamp(&SVector::from([5.0, -3.0])), SVector::from([1.0, -2.0]));
        assert_eq!(b.violation(&SVector::from([1.5, 0.0])), 0.5);
        assert_eq!(b.violation(&SVector::from([0.0, 0.0])), 0.0);
        let shrunk = b.shrink_coord(0, 0.25).unwrap();
        assert_eq!(shrunk.lower[0], -0.75);
        assert!(b.shrink_coord(0, 1.5).is_err());
    }

    #[test]
    fn interval_cos_bound() {
        assert_eq!(interval_abs_cos_max(-0.1, 0.1), 1.0); // contains 0
        assert_eq!(interval_abs_cos_max(3.0, 3.3), 1.0); // contains pi
        let v = interval_abs_cos_max(1.0, 1.5);
        assert_relative_eq!(v, 1f64.cos(), epsilon = 1e-15);
    }
}
