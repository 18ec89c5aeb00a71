//! Operator-splitting QP solver.
//!
//! Splits the box-constrained QP into a linear solve plus a projection and
//! alternates between them with over-relaxation. The linear system
//! `(H + sigma*I + rho*C'C)` is factored once per penalty value; the penalty
//! `rho` is rebalanced when primal and dual residuals drift apart. After
//! convergence an active-set polish solves the equality-constrained KKT
//! system to push residuals to machine-level accuracy. Divergence of the
//! iterates is mined for certificates of primal or dual infeasibility.
//!
//! The iteration is deterministic: no randomness, no time-based decisions,
//! identical inputs give bit-identical outputs.

use super::{KktResiduals, QpProblem, QpSolution, SolveError, SolveStatus};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

#[derive(Debug, Clone, Copy)]
pub struct AdmmSettings {
    /// Initial constraint penalty.
    pub rho: f64,
    /// Small primal regularization keeping the linear system positive
    /// definite even when H is only semidefinite.
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Threshold for declaring an infeasibility certificate valid.
    pub eps_infeasible: f64,
    pub max_iterations: usize,
    /// Iterations between rho rebalancing checks.
    pub rho_update_interval: usize,
    /// Equilibration passes over the problem data before iterating;
    /// 0 solves the problem as given. One pass levels the gross row and
    /// column imbalance; on dense condensed problems further passes tend
    /// to distort the curvature more than they help.
    pub scaling_passes: usize,
    /// Run the active-set polish after convergence.
    pub polish: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            eps_infeasible: 1e-8,
            max_iterations: 20_000,
            rho_update_interval: 100,
            scaling_passes: 1,
            polish: true,
        }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Rebalance only when the residual ratio is off by more than this factor;
/// every rho change costs a refactorization.
const RHO_RATIO_TRIGGER: f64 = 5.0;
/// Regularization for the polish KKT system, removed by iterative refinement.
const POLISH_REG: f64 = 1e-9;
const POLISH_REFINE_STEPS: usize = 3;
/// Clamp on each per-pass equilibration factor.
const RUIZ_MIN_SCALE: f64 = 1e-6;
const RUIZ_MAX_SCALE: f64 = 1e6;

/// Warm-start state carried between related solves.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub z: Option<DVector<f64>>,
    pub y: Option<DVector<f64>>,
}

pub struct AdmmSolver {
    pub settings: AdmmSettings,
}

impl AdmmSolver {
    pub fn new(settings: AdmmSettings) -> Self {
        Self { settings }
    }

    pub fn solve(&self, problem: &QpProblem) -> Result<QpSolution, SolveError> {
        self.solve_warm(problem, &WarmStart::default())
    }

    pub fn solve_warm(
        &self,
        problem: &QpProblem,
        warm: &WarmStart,
    ) -> Result<QpSolution, SolveError> {
        let s = &self.settings;
        let d = problem.num_vars();
        let k = problem.num_constraints();

        // Iterate on equilibrated data; a step that is uniform in the scaled
        // metric then fits every variable regardless of the units the caller
        // used. Residuals are mapped back before testing the tolerances, so
        // the answer is as accurate as an unscaled solve.
        let sc = equilibrate(problem, s.scaling_passes);

        let mut x = match &warm.z {
            Some(z0) if z0.len() == d && z0.iter().all(|v| v.is_finite()) => {
                z0.component_div(&sc.d)
            }
            Some(_) => return Err(SolveError::Dimension("warm start z")),
            None => DVector::zeros(d),
        };
        let mut y = match &warm.y {
            Some(y0) if y0.len() == k && y0.iter().all(|v| v.is_finite()) => {
                DVector::from_fn(k, |i, _| y0[i] * sc.cost / sc.e[i])
            }
            Some(_) => return Err(SolveError::Dimension("warm start y")),
            None => DVector::zeros(k),
        };

        let mut rho = s.rho;
        let mut factor = factorize(&sc.h, &sc.c, s.sigma, rho)?;
        let mut zc = clamp(&(&sc.c * &x), &sc.lower, &sc.upper);

        let mut status = SolveStatus::MaxIterations;
        let mut iterations = s.max_iterations;
        // Doubles after every rho change, so the penalty settles and the
        // tail runs as plain fixed-rho iteration, which always converges.
        let mut rho_interval = s.rho_update_interval.max(1);

        for iter in 1..=s.max_iterations {
            // Linear step: minimize the augmented objective with the
            // constraint-space iterate held fixed.
            let rhs = s.sigma * &x - &sc.g + sc.c.transpose() * (rho * &zc - &y);
            let x_tilde = factor.solve(&rhs);
            let cz_tilde = &sc.c * &x_tilde;

            // Over-relaxed projection and dual ascent.
            let x_new = s.alpha * &x_tilde + (1.0 - s.alpha) * &x;
            let mix = s.alpha * &cz_tilde + (1.0 - s.alpha) * &zc;
            let zc_new = clamp(&(&mix + &y / rho), &sc.lower, &sc.upper);
            let y_new = &y + rho * (&mix - &zc_new);

            let delta_x = &x_new - &x;
            let delta_y = &y_new - &y;
            x = x_new;
            zc = zc_new;
            y = y_new;

            // Residuals and tolerances in the original units: divide
            // constraint rows by e, variable rows by d and the cost factor.
            let cz = &sc.c * &x;
            let hx = &sc.h * &x;
            let cty = sc.c.transpose() * &y;
            let r_primal = inf_norm_div(&(&cz - &zc), &sc.e);
            let r_dual = inf_norm_div(&(&hx + &sc.g + &cty), &sc.d) / sc.cost;
            let eps_primal = s.eps_abs
                + s.eps_rel * inf_norm_div(&cz, &sc.e).max(inf_norm_div(&zc, &sc.e));
            let eps_dual = s.eps_abs
                + s.eps_rel
                    * inf_norm_div(&hx, &sc.d)
                        .max(inf_norm_div(&sc.g, &sc.d))
                        .max(inf_norm_div(&cty, &sc.d))
                    / sc.cost;

            if r_primal <= eps_primal && r_dual <= eps_dual {
                status = SolveStatus::Solved;
                iterations = iter;
                break;
            }
            // Certificates are checked against the original data, so the
            // diverging directions must be mapped back first.
            let delta_x_orig = delta_x.component_mul(&sc.d);
            let delta_y_orig =
                DVector::from_fn(k, |i, _| delta_y[i] * sc.e[i] / sc.cost);
            if is_primal_infeasibility_certificate(problem, &delta_y_orig, s.eps_infeasible)
            {
                status = SolveStatus::PrimalInfeasible;
                iterations = iter;
                break;
            }
            if is_dual_infeasibility_certificate(problem, &delta_x_orig, s.eps_infeasible)
            {
                status = SolveStatus::DualInfeasible;
                iterations = iter;
                break;
            }

            if iter % rho_interval == 0 {
                // Balance the residuals of the problem being iterated, i.e.
                // the scaled one; judging by the original units would chase a
                // different stationary point than the iteration sees. The
                // denominators are floored so a problem whose solution is the
                // origin does not turn the ratio into noise, and each change
                // is capped at a decade so one bad estimate cannot throw rho
                // against a clamp.
                let rel_primal = inf_norm(&(&cz - &zc))
                    / inf_norm(&cz).max(inf_norm(&zc)).max(s.eps_abs).max(1e-300);
                let rel_dual = inf_norm(&(&hx + &sc.g + &cty))
                    / inf_norm(&hx)
                        .max(inf_norm(&sc.g))
                        .max(inf_norm(&cty))
                        .max(s.eps_abs)
                        .max(1e-300);
                let ratio = (rel_primal / rel_dual.max(1e-300)).sqrt();
                if ratio > RHO_RATIO_TRIGGER || ratio < 1.0 / RHO_RATIO_TRIGGER {
                    rho = (rho * ratio.clamp(0.1, 10.0)).clamp(RHO_MIN, RHO_MAX);
                    factor = factorize(&sc.h, &sc.c, s.sigma, rho)?;
                    rho_interval = rho_interval.saturating_mul(2);
                }
            }
        }

        let mut x = x.component_mul(&sc.d);
        let mut y = DVector::from_fn(k, |i, _| y[i] * sc.e[i] / sc.cost);

        let mut polished = false;
        if status == SolveStatus::Solved && s.polish {
            if let Some((zp, yp)) = polish(problem, &y) {
                let before = problem.kkt_residuals(&x, &y).max();
                let after = problem.kkt_residuals(&zp, &yp).max();
                if after <= before {
                    x = zp;
                    y = yp;
                    polished = true;
                }
            }
        }

        let residuals = match status {
            SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible => KktResiduals {
                primal: f64::INFINITY,
                dual: f64::INFINITY,
                complementarity: f64::INFINITY,
            },
            _ => problem.kkt_residuals(&x, &y),
        };
        Ok(QpSolution {
            objective: problem.objective(&x),
            z: x,
            y,
            status,
            iterations,
            residuals,
            polished,
        })
    }
}

fn factorize(
    h: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma: f64,
    rho: f64,
) -> Result<Cholesky<f64, Dyn>, SolveError> {
    let d = h.nrows();
    let mut m = h.clone() + DMatrix::identity(d, d) * sigma;
    m += rho * c.transpose() * c;
    Cholesky::new(m).ok_or(SolveError::Factorization)
}

/// Problem data after diagonal equilibration, together with the scalings
/// needed to map iterates back: x = d .* x_scaled, y = e .* y_scaled / cost.
struct ScaledData {
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

fn ruiz_factor(norm: f64) -> f64 {
    if norm.is_finite() && norm > 0.0 {
        (1.0 / norm.sqrt()).clamp(RUIZ_MIN_SCALE, RUIZ_MAX_SCALE)
    } else {
        1.0
    }
}

/// Modified Ruiz equilibration: repeatedly scale each variable and each
/// constraint row by the inverse square root of its largest coefficient in
/// the stacked matrix [H C'; C 0], then normalize the cost so the quadratic
/// and linear terms sit near unit size. Infinite bounds survive scaling
/// because every factor is finite and positive.
fn equilibrate(problem: &QpProblem, passes: usize) -> ScaledData {
    let n = problem.num_vars();
    let k = problem.num_constraints();
    let mut h = problem.h.clone();
    let mut g = problem.g.clone();
    let mut c = problem.c.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(k, 1.0);
    let mut cost = 1.0;

    for _ in 0..passes {
        let delta = DVector::from_fn(n, |j, _| {
            let in_h = h.column(j).amax();
            let in_c = if k > 0 { c.column(j).amax() } else { 0.0 };
            ruiz_factor(in_h.max(in_c))
        });
        let eps = DVector::from_fn(k, |i, _| ruiz_factor(c.row(i).amax()));

        for j in 0..n {
            h.column_mut(j).scale_mut(delta[j]);
            c.column_mut(j).scale_mut(delta[j]);
        }
        for i in 0..n {
            h.row_mut(i).scale_mut(delta[i]);
        }
        for i in 0..k {
            c.row_mut(i).scale_mut(eps[i]);
        }
        g.component_mul_assign(&delta);
        d.component_mul_assign(&delta);
        e.component_mul_assign(&eps);

        let mean_col = (0..n).map(|j| h.column(j).amax()).sum::<f64>() / n as f64;
        let size = mean_col.max(inf_norm(&g));
        let gamma = if size.is_finite() && size > 0.0 {
            (1.0 / size).clamp(RUIZ_MIN_SCALE, RUIZ_MAX_SCALE)
        } else {
            1.0
        };
        h *= gamma;
        g *= gamma;
        cost *= gamma;
    }

    let lower = DVector::from_fn(k, |i, _| problem.lower[i] * e[i]);
    let upper = DVector::from_fn(k, |i, _| problem.upper[i] * e[i]);
    ScaledData { h, g, c, lower, upper, d, e, cost }
}

fn clamp(v: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i]))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Infinity norm of v with each component divided by the matching positive
/// scale, without materializing the quotient.
fn inf_norm_div(v: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..v.len() {
        worst = worst.max((v[i] / scale[i]).abs());
    }
    worst
}

/// A diverging dual direction proves the constraints are inconsistent when it
/// lies in the null space of C' and has negative support on the bounds.
/// Rows with an infinite bound cannot contribute finite support, so the
/// direction must vanish against them.
fn is_primal_infeasibility_certificate(
    problem: &QpProblem,
    delta_y: &DVector<f64>,
    eps: f64,
) -> bool {
    let norm = inf_norm(delta_y);
    if norm <= eps {
        return false;
    }
    let dir = delta_y / norm;
    if inf_norm(&(problem.c.transpose() * &dir)) > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dir.len() {
        let up = dir[i].max(0.0);
        let down = dir[i].min(0.0);
        if up > eps && !problem.upper[i].is_finite() {
            return false;
        }
        if down < -eps && !problem.lower[i].is_finite() {
            return false;
        }
        if problem.upper[i].is_finite() {
            support += problem.upper[i] * up;
        }
        if problem.lower[i].is_finite() {
            support += problem.lower[i] * down;
        }
    }
    support < -eps
}

/// A diverging primal direction proves the objective is unbounded when it is
/// an objective descent ray along which every constraint stays satisfiable.
fn is_dual_infeasibility_certificate(
    problem: &QpProblem,
    delta_x: &DVector<f64>,
    eps: f64,
) -> bool {
    let norm = inf_norm(delta_x);
    if norm <= eps {
        return false;
    }
    let dir = delta_x / norm;
    if inf_norm(&(&problem.h * &dir)) > eps || problem.g.dot(&dir) >= -eps {
        return false;
    }
    let c_dir = &problem.c * &dir;
    for i in 0..c_dir.len() {
        if problem.upper[i].is_finite() && c_dir[i] > eps {
            return false;
        }
        if problem.lower[i].is_finite() && c_dir[i] < -eps {
            return false;
        }
    }
    true
}

/// Re-solve with the bounds the duals mark active taken as equalities.
///
/// Dual magnitudes near the optimum separate truly active rows from rows
/// that merely chatter at their bound, but the gap location depends on the
/// problem scaling. Rather than guess one threshold, try a ladder of them,
/// audit each candidate with the independent KKT residuals, and keep the
/// best. Returns None when no candidate system could be solved; the caller
/// keeps the unpolished iterate in that case.
fn polish(problem: &QpProblem, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let scale = inf_norm(y).max(1.0);
    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    let mut last_active: Option<Vec<(usize, f64)>> = None;
    for rel in [0.0, 1e-12, 1e-9, 1e-6, 1e-3] {
        let threshold = rel * scale;
        let active = active_set(problem, y, threshold);
        if active.len() > problem.num_vars() || last_active.as_ref() == Some(&active) {
            continue;
        }
        if let Some((zp, yp)) = solve_active(problem, &active) {
            let residual = problem.kkt_residuals(&zp, &yp).max();
            if best.as_ref().is_none_or(|(_, _, r)| residual < *r) {
                best = Some((zp, yp, residual));
            }
        }
        last_active = Some(active);
    }
    best.map(|(zp, yp, _)| (zp, yp))
}

/// Rows pinned to a bound: equality rows always, inequality rows when the
/// dual pushes on a finite bound harder than `threshold`.
fn active_set(problem: &QpProblem, y: &DVector<f64>, threshold: f64) -> Vec<(usize, f64)> {
    let mut active = Vec::new();
    for i in 0..problem.num_constraints() {
        if problem.lower[i] == problem.upper[i] {
            active.push((i, problem.lower[i]));
        } else if y[i] < -threshold && problem.lower[i].is_finite() {
            active.push((i, problem.lower[i]));
        } else if y[i] > threshold && problem.upper[i].is_finite() {
            active.push((i, problem.upper[i]));
        }
    }
    active
}

/// Equality-constrained solve on the active rows with light regularization,
/// followed by iterative refinement against the unregularized system.
fn solve_active(
    problem: &QpProblem,
    active: &[(usize, f64)],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let d = problem.num_vars();
    let k = problem.num_constraints();
    let na = active.len();

    let mut kkt = DMatrix::zeros(d + na, d + na);
    kkt.view_mut((0, 0), (d, d)).copy_from(&problem.h);
    for r in 0..d {
        kkt[(r, r)] += POLISH_REG;
    }
    for (slot, &(row, _)) in active.iter().enumerate() {
        for col in 0..d {
            kkt[(d + slot, col)] = problem.c[(row, col)];
            kkt[(col, d + slot)] = problem.c[(row, col)];
        }
        kkt[(d + slot, d + slot)] = -POLISH_REG;
    }
    let lu = kkt.lu();

    let mut rhs = DVector::zeros(d + na);
    rhs.rows_mut(0, d).copy_from(&(-&problem.g));
    for (slot, &(_, bound)) in active.iter().enumerate() {
        rhs[d + slot] = bound;
    }

    let mut sol = lu.solve(&rhs)?;
    // The regularization perturbs the system; refine against the exact one.
    for _ in 0..POLISH_REFINE_STEPS {
        let xs = sol.rows(0, d).into_owned();
        let nu = sol.rows(d, na).into_owned();
        let mut top = -&problem.g - &problem.h * &xs;
        for (slot, &(row, _)) in active.iter().enumerate() {
            top -= nu[slot] * problem.c.row(row).transpose();
        }
        let mut residual = DVector::zeros(d + na);
        residual.rows_mut(0, d).copy_from(&top);
        for (slot, &(row, bound)) in active.iter().enumerate() {
            residual[d + slot] = bound - (problem.c.row(row) * &xs)[0];
        }
        let correction = lu.solve(&residual)?;
        sol += correction;
    }

    let xp = sol.rows(0, d).into_owned();
    if xp.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut yp = DVector::zeros(k);
    for (slot, &(row, _)) in active.iter().enumerate() {
        yp[row] = sol[d + slot];
    }
    Some((xp, yp))
}
