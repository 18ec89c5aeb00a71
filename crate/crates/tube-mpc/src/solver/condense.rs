//! Horizon condensation: eliminate the predicted states from a finite-horizon
//! tracking problem and emit a dense [`QpProblem`] over the stacked inputs.
//!
//! The model is a chain `x_{i+1} = A_i x_i + B_i u_i + c_i` starting from a
//! fixed `x0`. States are affine in the stacked inputs, so box constraints on
//! them become general rows and the tracking cost becomes a quadratic form.
//! The constant part of the cost (including the fixed first stage) is folded
//! into the QP constant so the reported objective equals the horizon cost.
//!
//! Tracking errors are masked: only coordinates flagged in `mask` are
//! compared against the reference, the rest are free. The optional terminal
//! ball bounds the masked terminal error in the norm induced by the terminal
//! weight. It enters the QP as the largest axis-aligned box inscribed in the
//! ball (in the eigenbasis of the weight), one pair of one-sided rows per
//! nonzero eigendirection, all sharing a single nonnegative slack variable.
//! With `hard` set the slack is pinned to zero, otherwise it is charged
//! linearly in the objective.

use super::{QpProblem, SolveError};
use crate::plant::Bounds;
use crate::{InputMat, InputVec, StateMat, StateVec, NU, NX};
use nalgebra::{DMatrix, DVector};

/// One step of the prediction model: `x_next = a x + b u + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineStep {
    pub a: StateMat,
    pub b: InputMat,
    pub c: StateVec,
}

/// Terminal-error ball `||x_err_N||_P <= epsilon`, softened by a slack
/// charged at `slack_weight` per unit unless `hard`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalBall {
    pub epsilon: f64,
    pub slack_weight: f64,
    pub hard: bool,
}

/// Everything needed to pose the condensed problem.
pub struct CondenseInputs<'a> {
    pub x0: StateVec,
    /// Model chain; its length is the horizon N.
    pub steps: &'a [AffineStep],
    /// Stage state weights (applied to masked error).
    pub q_diag: StateVec,
    /// Stage input weights.
    pub r_diag: InputVec,
    /// Tracked coordinates; unmasked coordinates carry no cost.
    pub mask: [bool; NX],
    /// Reference states, one per step including both endpoints (N+1).
    pub reference: &'a [StateVec],
    /// Terminal weight; masked before use. Also defines the terminal ball.
    pub p_terminal: StateMat,
    /// Per-step state boxes (N+1); rows are emitted for steps 1..=N on
    /// coordinates with at least one finite bound.
    pub state_boxes: &'a [Bounds<NX>],
    pub input_box: Bounds<NU>,
    pub terminal_ball: Option<TerminalBall>,
}

/// Eigenvalues of the masked terminal weight below this fraction of the
/// largest are treated as zero when building the inscribed box.
const TERMINAL_RANK_TOL: f64 = 1e-12;

/// A condensed QP plus enough of the model to decode solutions exactly.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub problem: QpProblem,
    pub horizon: usize,
    pub has_slack: bool,
    x0: StateVec,
    steps: Vec<AffineStep>,
}

/// Inputs, replayed states, and terminal slack recovered from a QP point.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPlan {
    pub inputs: Vec<InputVec>,
    /// N+1 states starting at x0, replayed through the model chain.
    pub states: Vec<StateVec>,
    pub slack: f64,
}

impl CondensedQp {
    pub fn decode(&self, z: &DVector<f64>) -> DecodedPlan {
        let n = self.horizon;
        let inputs: Vec<InputVec> = (0..n)
            .map(|j| InputVec::new(z[3 * j], z[3 * j + 1], z[3 * j + 2]))
            .collect();
        let states = replay(self.x0, &self.steps, &inputs);
        let slack = if self.has_slack { z[3 * n] } else { 0.0 };
        DecodedPlan {
            inputs,
            states,
            slack,
        }
    }
}

/// Weighted eigen-directions of the masked terminal weight: one pair
/// `(sqrt(lambda_j), v_j)` per eigenvalue that carries weight relative to the
/// largest, so the weighted norm decomposes as
/// `|e|_P^2 = sum_j (sqrt(lambda_j) v_j' e)^2` over the returned axes. Empty
/// when the masked weight vanishes.
pub fn ball_axes(p_terminal: &StateMat, mask: &[bool; NX]) -> Vec<(f64, StateVec)> {
    let m = StateMat::from_diagonal(&StateVec::from_fn(|r, _| if mask[r] { 1.0 } else { 0.0 }));
    let eig = nalgebra::SymmetricEigen::new(m * p_terminal * m);
    let lambda_max = eig.eigenvalues.amax();
    (0..NX)
        .filter(|&j| eig.eigenvalues[j] > TERMINAL_RANK_TOL * lambda_max.max(1.0))
        .map(|j| {
            (
                eig.eigenvalues[j].sqrt(),
                eig.eigenvectors.column(j).into_owned(),
            )
        })
        .collect()
}

/// Roll the affine chain forward under the given inputs.
pub fn replay(x0: StateVec, steps: &[AffineStep], inputs: &[InputVec]) -> Vec<StateVec> {
    let mut states = Vec::with_capacity(steps.len() + 1);
    states.push(x0);
    for (step, u) in steps.iter().zip(inputs) {
        let x = states.last().unwrap();
        states.push(step.a * x + step.b * u + step.c);
    }
    states
}

pub fn condense(inputs: &CondenseInputs) -> Result<CondensedQp, SolveError> {
    let n = inputs.steps.len();
    if n == 0 {
        return Err(SolveError::Dimension("empty horizon"));
    }
    if inputs.reference.len() != n + 1 {
        return Err(SolveError::Dimension("reference length"));
    }
    if inputs.state_boxes.len() != n + 1 {
        return Err(SolveError::Dimension("state box count"));
    }
    if !inputs.x0.iter().all(|v| v.is_finite()) {
        return Err(SolveError::NotANumber("initial state"));
    }

    let has_slack = inputs.terminal_ball.is_some();
    let d = 3 * n + usize::from(has_slack);

    // Free response phi_i and input-to-state maps su_i (5 x 3n each).
    let mut phi: Vec<StateVec> = Vec::with_capacity(n + 1);
    let mut su: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    phi.push(inputs.x0);
    su.push(DMatrix::zeros(NX, 3 * n));
    for (i, step) in inputs.steps.iter().enumerate() {
        let a_dyn = DMatrix::from_fn(NX, NX, |r, c| step.a[(r, c)]);
        phi.push(step.a * phi[i] + step.c);
        let mut next = &a_dyn * &su[i];
        for r in 0..NX {
            for c in 0..NU {
                next[(r, 3 * i + c)] += step.b[(r, c)];
            }
        }
        su.push(next);
    }

    let mask_diag = StateVec::from_fn(|r, _| if inputs.mask[r] { 1.0 } else { 0.0 });
    let q_masked = StateVec::from_fn(|r, _| inputs.q_diag[r] * mask_diag[r]);
    let p_masked = {
        let m = StateMat::from_diagonal(&mask_diag);
        m * inputs.p_terminal * m
    };

    let mut h = DMatrix::zeros(d, d);
    let mut g = DVector::zeros(d);
    let mut constant = 0.0;

    // Input cost: block diagonal.
    for j in 0..n {
        for a in 0..NU {
            h[(3 * j + a, 3 * j + a)] += 2.0 * inputs.r_diag[a];
        }
    }
    // Stage state cost for steps 0..n-1 (step 0 is constant) and terminal.
    let err0 = masked_error(&inputs.x0, &inputs.reference[0], &inputs.mask);
    constant += quad_diag(&q_masked, &err0);
    for i in 1..=n {
        let weight: StateMat = if i < n {
            StateMat::from_diagonal(&q_masked)
        } else {
            p_masked
        };
        let err = masked_error(&phi[i], &inputs.reference[i], &inputs.mask);
        let w_su = weight_times(&weight, &su[i]);
        let quad = su[i].transpose() * &w_su;
        for r in 0..3 * n {
            for c in 0..3 * n {
                h[(r, c)] += 2.0 * quad[(r, c)];
            }
        }
        let lin = w_su.transpose() * err;
        for r in 0..3 * n {
            g[r] += 2.0 * lin[r];
        }
        constant += (err.transpose() * weight * err)[0];
    }

    // Constraint rows.
    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for j in 0..n {
        for a in 0..NU {
            let mut row = DVector::zeros(d);
            row[3 * j + a] = 1.0;
            rows.push((row, inputs.input_box.lower[a], inputs.input_box.upper[a]));
        }
    }
    for i in 1..=n {
        let sb = &inputs.state_boxes[i];
        for r in 0..NX {
            let (lo, up) = (sb.lower[r], sb.upper[r]);
            if !lo.is_finite() && !up.is_finite() {
                continue;
            }
            let mut row = DVector::zeros(d);
            for c in 0..3 * n {
                row[c] = su[i][(r, c)];
            }
            rows.push((row, lo - phi[i][r], up - phi[i][r]));
        }
    }

    if let Some(ball) = &inputs.terminal_ball {
        if !(ball.epsilon.is_finite() && ball.epsilon > 0.0) {
            return Err(SolveError::NotANumber("terminal radius"));
        }
        let axes = ball_axes(&inputs.p_terminal, &inputs.mask);
        if axes.is_empty() {
            return Err(SolveError::NotANumber("terminal weight is zero"));
        }
        // Box of half-width eps/sqrt(rank) in the weighted eigenbasis sits
        // inside the epsilon-ball of the weighted norm.
        let half_width = ball.epsilon / (axes.len() as f64).sqrt();
        let err_n = masked_error(&phi[n], &inputs.reference[n], &inputs.mask);
        let slack_col = 3 * n;
        for (scale, axis) in &axes {
            let along = DVector::from_fn(3 * n, |c, _| {
                scale * (0..NX).map(|r| axis[r] * su[n][(r, c)]).sum::<f64>()
            });
            let offset = scale * axis.dot(&err_n);
            for sign in [1.0f64, -1.0] {
                let mut row = DVector::zeros(d);
                for c in 0..3 * n {
                    row[c] = sign * along[c];
                }
                row[slack_col] = -1.0;
                rows.push((row, f64::NEG_INFINITY, half_width - sign * offset));
            }
        }
        let mut slack_row = DVector::zeros(d);
        slack_row[slack_col] = 1.0;
        let slack_cap = if ball.hard { 0.0 } else { f64::INFINITY };
        rows.push((slack_row, 0.0, slack_cap));
        if !ball.hard {
            if !(ball.slack_weight.is_finite() && ball.slack_weight > 0.0) {
                return Err(SolveError::NotANumber("slack weight"));
            }
            g[slack_col] += ball.slack_weight;
        }
    }

    let k = rows.len();
    let mut c = DMatrix::zeros(k, d);
    let mut lower = DVector::zeros(k);
    let mut upper = DVector::zeros(k);
    for (idx, (row, lo, up)) in rows.into_iter().enumerate() {
        c.row_mut(idx).copy_from(&row.transpose());
        lower[idx] = lo;
        upper[idx] = up;
    }

    // Accumulated products are symmetric only up to rounding.
    let h = 0.5 * (&h + h.transpose());
    let problem = QpProblem::new(h, g, c, lower, upper, constant)?;
    Ok(CondensedQp {
        problem,
        horizon: n,
        has_slack,
        x0: inputs.x0,
        steps: inputs.steps.to_vec(),
    })
}

fn masked_error(x: &StateVec, r: &StateVec, mask: &[bool; NX]) -> StateVec {
    StateVec::from_fn(|i, _| if mask[i] { x[i] - r[i] } else { 0.0 })
}

fn quad_diag(w: &StateVec, e: &StateVec) -> f64 {
    (0..NX).map(|i| w[i] * e[i] * e[i]).sum()
}

fn weight_times(w: &StateMat, m: &DMatrix<f64>) -> DMatrix<f64> {
    let w_dyn = DMatrix::from_fn(NX, NX, |r, c| w[(r, c)]);
    &w_dyn * m
}
