//! Linearization of the arm dynamics and certified bounds on its error.
//!
//! Around an anchor `(xh, uh)` the continuous dynamics are approximated by
//! `f(x, u) ~= Ac x + Bc u + omega` with `omega = f(xh, uh) - Ac xh - Bc uh`
//! so the model is exact at the anchor. The discrete model is forward Euler:
//! `A = I + dt Ac`, `B = dt Bc`, `offset = dt omega`.
//!
//! The remainder over an interval `|x - xh| <= dx_radius`,
//! `|u - uh| <= du_radius` is bounded by
//!
//! ```text
//! eta2_rate = |omega| + eta_H (l1 dx_radius + l2 du_radius)
//! ```
//!
//! with `eta_H` a bound on the dynamics Hessian and `(l1, l2)` the Lipschitz
//! constants. The per-step disturbance equivalent is `eta2 = dt eta2_rate`,
//! and the total per-step disturbance ball seen by the tube machinery has
//! radius `eta = eta1 + eta2`.


use crate::plant::{ArmParams, Bounds};
use crate::{idx, InputMat, InputVec, StateMat, StateVec, NU};

/// Jacobian of the continuous dynamics with respect to the state.
/// Only the position rows are nonzero: column `th_j` holds
/// `(-l_j cos(th_j) w_j, -l_j sin(th_j) w_j)`.
pub fn state_jacobian(p: &ArmParams, x: &StateVec, u: &InputVec) -> StateMat {
    let mut a = StateMat::zeros();
    for j in 0..3 {
        let th = x[idx::ANGLES[j]];
        let l = p.link_lengths[j];
        a[(idx::X, idx::ANGLES[j])] = -l * th.cos() * u[j];
        a[(idx::Y, idx::ANGLES[j])] = -l * th.sin() * u[j];
    }
    a
}

/// Jacobian of the continuous dynamics with respect to the input.
/// Column `j` is `(-l_j sin(th_j), l_j cos(th_j), e_j)`.
pub fn input_jacobian(p: &ArmParams, thetas: &[f64; 3]) -> InputMat {
    let mut b = InputMat::zeros();
    for j in 0..3 {
        let l = p.link_lengths[j];
        b[(idx::X, j)] = -l * thetas[j].sin();
        b[(idx::Y, j)] = l * thetas[j].cos();
        b[(idx::ANGLES[j], j)] = 1.0;
    }
    b
}

/// Affine model of one Euler step around an anchor point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedModel {
    pub anchor_state: StateVec,
    pub anchor_input: InputVec,
    pub dt: f64,
    /// Continuous-time Jacobians and affine offset.
    pub a_rate: StateMat,
    pub b_rate: InputMat,
    pub omega: StateVec,
    /// Discrete one-step model `x+ = A x + B u + offset`.
    pub a: StateMat,
    pub b: InputMat,
    pub offset: StateVec,
}

impl LinearizedModel {
    /// One step of the affine discrete model.
    pub fn predict(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.a * x + self.b * u + self.offset
    }

    /// Continuous-time remainder of the affine model at `(x, u)`.
    pub fn residual(&self, p: &ArmParams, x: &StateVec, u: &InputVec) -> StateVec {
        p.dynamics(x, u) - (self.a_rate * x + self.b_rate * u + self.omega)
    }
}

/// Build the affine step model anchored at `(x, u)`.
pub fn linearize(p: &ArmParams, x: &StateVec, u: &InputVec, dt: f64) -> LinearizedModel {
    let a_rate = state_jacobian(p, x, u);
    let thetas = [x[idx::TH1], x[idx::TH2], x[idx::TH3]];
    let b_rate = input_jacobian(p, &thetas);
    let omega = p.dynamics(x, u) - a_rate * x - b_rate * u;
    LinearizedModel {
        anchor_state: *x,
        anchor_input: *u,
        dt,
        a_rate,
        b_rate,
        omega,
        a: StateMat::identity() + a_rate * dt,
        b: b_rate * dt,
        offset: omega * dt,
    }
}

/// Bound on the norm of the dynamics Hessian over the rate box.
///
/// Second derivatives of the arm dynamics are `+-l_j {sin,cos}(th_j) w_j`
/// (angle-angle) and `+-l_j {sin,cos}(th_j)` (angle-rate); per joint these
/// form a 2x2 block `[[a, b], [b, 0]]` with `|a| <= l_j wbar_j`,
/// `|b| <= l_j`, whose norm is `|a|/2 + sqrt(a^2/4 + b^2)`. The x and y
/// component Hessians contribute a factor sqrt(2). The bound is uniform in
/// the angles, scales linearly with the link lengths, and vanishes for a
/// zero-length arm.
pub fn hessian_bound(link_lengths: [f64; 3], input_box: &Bounds<NU>) -> f64 {
    let wbar = input_box.abs_max();
    let per_joint = (0..3)
        .map(|j| {
            let l = link_lengths[j];
            let a = l * wbar[j];
            a / 2.0 + (a * a / 4.0 + l * l).sqrt()
        })
        .fold(0.0f64, f64::max);
    2f64.sqrt() * per_joint
}

/// Linearization error rate over an interval with the given radii.
pub fn linearization_error_bound(
    omega_norm: f64,
    eta_h: f64,
    l1: f64,
    l2: f64,
    dx_radius: f64,
    du_radius: f64,
) -> f64 {
    omega_norm + eta_h * (l1 * dx_radius + l2 * du_radius)
}

/// Everything needed to defend the per-step disturbance radius `eta`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ErrorBudget {
    /// Physical per-step disturbance 2-norm bound.
    pub eta1: f64,
    pub eta_h: f64,
    pub l1: f64,
    pub l2: f64,
    pub dx_radius: f64,
    pub du_radius: f64,
    pub omega_norm: f64,
    /// Continuous-time linearization error bound over the interval.
    pub eta2_rate: f64,
    /// Per-step linearization error contribution, `dt * eta2_rate`.
    pub eta2: f64,
    /// Total per-step disturbance radius, `eta1 + eta2`.
    pub eta: f64,
}

/// Interval radii for the error budget: the state can drift one step at the
/// admissible top speed plus whatever tube radius is carried into the
/// interval, while the input may jump anywhere in its box.
pub fn interval_radii(p: &ArmParams, dt: f64, carried_radius: f64) -> (f64, f64) {
    let wbar = p.input_box.abs_max();
    let du = 2.0 * wbar.norm();
    (dt * p.speed_bound() + carried_radius, du)
}

/// Assemble the certified budget for a model over the given interval radii.
pub fn error_budget(
    p: &ArmParams,
    model: &LinearizedModel,
    dx_radius: f64,
    du_radius: f64,
) -> ErrorBudget {
    let (l1, l2) = p.lipschitz_constants(&p.state_box, &p.input_box);
    let eta_h = hessian_bound(p.link_lengths, &p.input_box);
    let omega_norm = model.omega.norm();
    let eta2_rate = linearization_error_bound(omega_norm, eta_h, l1, l2, dx_radius, du_radius);
    let eta2 = model.dt * eta2_rate;
    ErrorBudget {
        eta1: p.eta1,
        eta_h,
        l1,
        l2,
        dx_radius,
        du_radius,
        omega_norm,
        eta2_rate,
        eta2,
        eta: p.eta1 + eta2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn benchmark_anchor() -> (ArmParams, StateVec, InputVec) {
        let p = ArmParams::benchmark();
        let x = ArmParams::benchmark_initial_state();
        let u = InputVec::from([0.1, -0.05, 0.02]);
        (p, x, u)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = ArmParams::benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let x = StateVec::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let u = InputVec::from_fn(|_, _| rng.random_range(-0.2..0.2));
            let a = state_jacobian(&p, &x, &u);
            let th = [x[idx::TH1], x[idx::TH2], x[idx::TH3]];
            let b = input_jacobian(&p, &th);
            for j in 0..crate::NX {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let col = (p.dynamics(&xp, &u) - p.dynamics(&xm, &u)) / (2.0 * h);
                for i in 0..crate::NX {
                    assert_relative_eq!(a[(i, j)], col[i], epsilon = 1e-6, max_relative = 1e-6);
                }
            }
            for j in 0..NU {
                let mut up = u;
                let mut um = u;
                up[j] += h;
                um[j] -= h;
                let col = (p.dynamics(&x, &up) - p.dynamics(&x, &um)) / (2.0 * h);
                for i in 0..crate::NX {
                    assert_relative_eq!(b[(i, j)], col[i], epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn state_jacobian_vanishes_at_zero_input() {
        let p = ArmParams::benchmark();
        let x = ArmParams::benchmark_initial_state();
        let a = state_jacobian(&p, &x, &InputVec::zeros());
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_jacobian_at_right_angle() {
        use std::f64::consts::FRAC_PI_2;
        let p = ArmParams::benchmark();
        let b = input_jacobian(&p, &[FRAC_PI_2, 0.3, 0.7]);
        assert_relative_eq!(b[(idx::X, 0)], -p.link_lengths[0], epsilon = 1e-15);
        assert_relative_eq!(b[(idx::Y, 0)], 0.0, epsilon = 1e-15);
        assert_eq!(b[(idx::TH1, 0)], 1.0);
    }

    #[test]
    fn discrete_model_is_euler_of_the_affine_rate_model() {
        let (p, x, u) = benchmark_anchor();
        let m = linearize(&p, &x, &u, 0.1);
        assert_eq!(m.a, StateMat::identity() + m.a_rate * 0.1);
        assert_eq!(m.b, m.b_rate * 0.1);
        // Exactness at the anchor: one affine step equals one Euler step.
        let exact = p.step_nominal(&x, &u, 0.1);
        assert_relative_eq!((m.predict(&x, &u) - exact).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn offset_is_minus_a_times_anchor() {
        // The dynamics are linear in the input, so the affine offset reduces
        // to -Ac * anchor_state; pins the structure the budget leans on.
        let (p, x, u) = benchmark_anchor();
        let m = linearize(&p, &x, &u, 0.1);
        assert_relative_eq!((m.omega + m.a_rate * x).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn residual_dominated_by_certified_bound() {
        let (p, xh, uh) = benchmark_anchor();
        let m = linearize(&p, &xh, &uh, 0.1);
        let (dx_radius, du_radius) = interval_radii(&p, 0.1, 0.05);
        let budget = error_budget(&p, &m, dx_radius, du_radius);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            // Random admissible points within the interval radii.
            let x = loop {
                let d = StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let d = d * (rng.random_range(0.0..1.0f64) * dx_radius / d.norm().max(1e-12));
                let cand = xh + d;
                if p.state_box.contains(&cand) {
                    break cand;
                }
            };
            let u = loop {
                let d = InputVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let d = d * (rng.random_range(0.0..1.0f64) * du_radius / d.norm().max(1e-12));
                let cand = uh + d;
                if p.input_box.contains(&cand) {
                    break cand;
                }
            };
            worst = worst.max(m.residual(&p, &x, &u).norm());
        }
        assert!(
            worst <= budget.eta2_rate,
            "sampled residual {worst} exceeds bound {}",
            budget.eta2_rate
        );
    }

    #[test]
    fn sampled_second_differences_respect_hessian_bound() {
        let p = ArmParams::benchmark();
        let eta_h = hessian_bound(p.link_lengths, &p.input_box);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-4;
        for _ in 0..2000 {
            let x = StateVec::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let u = InputVec::from_fn(|i, _| {
                rng.random_range(p.input_box.lower[i]..=p.input_box.upper[i])
            });
            // Unit direction in the joint (state, input) space.
            let dx = StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let du = InputVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let scale = (dx.norm_squared() + du.norm_squared()).sqrt();
            let (dx, du) = (dx / scale, du / scale);
            let fp = p.dynamics(&(x + dx * h), &(u + du * h));
            let f0 = p.dynamics(&x, &u);
            let fm = p.dynamics(&(x - dx * h), &(u - du * h));
            let second = (fp - f0 * 2.0 + fm) / (h * h);
            assert!(
                second.norm() <= eta_h + 1e-3,
                "directional second difference {} exceeds eta_H {}",
                second.norm(),
                eta_h
            );
        }
    }

    #[test]
    fn hessian_bound_scales_with_link_lengths_and_vanishes_for_point_arm() {
        let p = ArmParams::benchmark();
        let one = hessian_bound(p.link_lengths, &p.input_box);
        let two = hessian_bound(
            [
                2.0 * p.link_lengths[0],
                2.0 * p.link_lengths[1],
                2.0 * p.link_lengths[2],
            ],
            &p.input_box,
        );
        assert_relative_eq!(two, 2.0 * one, epsilon = 1e-12);
        assert_eq!(hessian_bound([0.0, 0.0, 0.0], &p.input_box), 0.0);
    }

    #[test]
    fn error_bound_formula() {
        assert_relative_eq!(
            linearization_error_bound(0.0, 1.0, 1.0, 1.0, 0.1, 0.2),
            0.3,
            epsilon = 1e-15
        );
    }

    #[test]
    fn budget_totals_add_up() {
        let (p, x, u) = benchmark_anchor();
        let m = linearize(&p, &x, &u, 0.1);
        let b = error_budget(&p, &m, 0.2, 0.4);
        assert_eq!(b.eta, b.eta1 + b.eta2);
        assert_eq!(b.eta2, 0.1 * b.eta2_rate);
        assert!(b.eta2_rate >= b.omega_norm);
    }

    proptest! {
        #[test]
        fn error_bound_monotone_in_radii(
            dxa in 0.0..1.0f64, dxb in 0.0..1.0f64,
            dua in 0.0..1.0f64, dub in 0.0..1.0f64,
        ) {
            let lo = linearization_error_bound(0.3, 2.0, 0.9, 4.6, dxa.min(dxb), dua.min(dub));
            let hi = linearization_error_bound(0.3, 2.0, 0.9, 4.6, dxa.max(dxb), dua.max(dub));
            prop_assert!(lo <= hi);
        }
    }
}
