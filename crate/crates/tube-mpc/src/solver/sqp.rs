//! Sequential quadratic programming over a one-step prediction model.
//!
//! Each iteration linearizes the model along the current rollout, condenses
//! the resulting affine chain into a QP over the stacked inputs, solves it,
//! and backtracks along the step direction until a merit function (true cost
//! plus weighted constraint violation) decreases. Rollouts always use the
//! nonlinear model, so the returned states satisfy it exactly. When the
//! model is already affine the first QP step is exact and the second solve
//! only certifies convergence.

use super::admm::{AdmmSolver, WarmStart};
use super::condense::{ball_axes, condense, AffineStep, CondenseInputs, TerminalBall};
use super::{SolveError, SolveStatus};
use crate::plant::Bounds;
use crate::{InputVec, StateMat, StateVec, NU, NX};
use nalgebra::DVector;

/// One-step prediction model the SQP iterates against.
pub trait Model {
    fn step(&self, x: &StateVec, u: &InputVec) -> StateVec;
    /// Affine expansion around `(x, u)`, exact at the anchor:
    /// `step(x, u) == a x + b u + c`.
    fn linearize_step(&self, x: &StateVec, u: &InputVec) -> AffineStep;
}

/// A model that is its own linearization. The SQP solves these in a single
/// productive iteration, which makes it a direct cross-check against the
/// condensed QP path.
#[derive(Debug, Clone, Copy)]
pub struct AffineModel(pub AffineStep);

impl Model for AffineModel {
    fn step(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.0.a * x + self.0.b * u + self.0.c
    }

    fn linearize_step(&self, _x: &StateVec, _u: &InputVec) -> AffineStep {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SqpSettings {
    pub max_iterations: usize,
    /// Stop when the QP step is smaller than this in the inf norm.
    pub step_tolerance: f64,
    pub max_backtracks: usize,
    /// Weight on constraint violation in the line-search merit function.
    pub violation_weight: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-6,
            max_backtracks: 12,
            violation_weight: 1e4,
        }
    }
}

/// Finite-horizon tracking problem over a nonlinear model.
pub struct SqpProblem<'a, M: Model> {
    pub model: &'a M,
    pub x0: StateVec,
    pub q_diag: StateVec,
    pub r_diag: InputVec,
    pub mask: [bool; NX],
    /// Reference states including both endpoints (horizon + 1 entries).
    pub reference: &'a [StateVec],
    pub p_terminal: StateMat,
    /// Per-step state boxes (horizon + 1); enforced from step 1 on.
    pub state_boxes: &'a [Bounds<NX>],
    pub input_box: Bounds<NU>,
    /// Optional terminal region; soft balls add their slack penalty to the
    /// cost, hard balls count overshoot as infeasibility.
    pub terminal_ball: Option<TerminalBall>,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub inputs: Vec<InputVec>,
    /// Rollout of `inputs` through the nonlinear model (horizon + 1 states).
    pub states: Vec<StateVec>,
    /// Objective value, including the soft terminal slack penalty if any.
    pub cost: f64,
    /// Worst state-box violation along the rollout.
    pub violation: f64,
    /// Smallest slack that makes the terminal region rows hold (0 = inside).
    pub terminal_slack: f64,
    pub feasible: bool,
    /// QP solves performed.
    pub iterations: usize,
    /// Total inner ADMM iterations across all QP solves.
    pub qp_iterations: usize,
    pub converged: bool,
}

const FEASIBLE_TOL: f64 = 1e-9;

struct Iterate {
    inputs: Vec<InputVec>,
    states: Vec<StateVec>,
    cost: f64,
    violation_sum: f64,
    violation_max: f64,
    terminal_slack: f64,
}

/// Terminal region geometry shared with the condensed QP's inscribed box.
struct BallGeometry {
    axes: Vec<(f64, StateVec)>,
    half_width: f64,
    slack_weight: f64,
    hard: bool,
}

impl BallGeometry {
    fn build(ball: &TerminalBall, p_terminal: &StateMat, mask: &[bool; NX]) -> Option<Self> {
        let axes = ball_axes(p_terminal, mask);
        if axes.is_empty() {
            return None;
        }
        let half_width = ball.epsilon / (axes.len() as f64).sqrt();
        Some(Self {
            axes,
            half_width,
            slack_weight: ball.slack_weight,
            hard: ball.hard,
        })
    }

    /// Smallest slack making every terminal row feasible at the given error.
    fn needed_slack(&self, e_n: &StateVec) -> f64 {
        self.axes
            .iter()
            .map(|(scale, axis)| (scale * axis.dot(e_n)).abs() - self.half_width)
            .fold(0.0f64, f64::max)
    }
}

pub fn solve_sqp<M: Model>(
    problem: &SqpProblem<M>,
    solver: &AdmmSolver,
    settings: &SqpSettings,
    initial_inputs: Option<&[InputVec]>,
) -> Result<SqpResult, SolveError> {
    let n = problem.reference.len().checked_sub(1).unwrap_or(0);
    if n == 0 {
        return Err(SolveError::Dimension("empty horizon"));
    }
    if problem.state_boxes.len() != n + 1 {
        return Err(SolveError::Dimension("state box count"));
    }

    let start: Vec<InputVec> = match initial_inputs {
        Some(us) if us.len() == n => us.iter().map(|u| problem.input_box.clamp(u)).collect(),
        Some(_) => return Err(SolveError::Dimension("initial inputs")),
        None => vec![InputVec::zeros(); n],
    };

    let ball = problem
        .terminal_ball
        .as_ref()
        .and_then(|b| BallGeometry::build(b, &problem.p_terminal, &problem.mask));

    let mut current = evaluate(problem, ball.as_ref(), start);
    let mut best = snapshot(&current);
    let mut qp_iterations = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut warm_y: Option<DVector<f64>> = None;

    for _ in 0..settings.max_iterations {
        let steps: Vec<AffineStep> = (0..n)
            .map(|i| problem.model.linearize_step(&current.states[i], &current.inputs[i]))
            .collect();
        let qp = condense(&CondenseInputs {
            x0: problem.x0,
            steps: &steps,
            q_diag: problem.q_diag,
            r_diag: problem.r_diag,
            mask: problem.mask,
            reference: problem.reference,
            p_terminal: problem.p_terminal,
            state_boxes: problem.state_boxes,
            input_box: problem.input_box,
            terminal_ball: problem.terminal_ball,
        })?;
        let warm = WarmStart {
            z: Some(stack(&current.inputs, qp.has_slack, current.terminal_slack)),
            y: warm_y.take(),
        };
        let sol = solver.solve_warm(&qp.problem, &warm)?;
        iterations += 1;
        qp_iterations += sol.iterations;
        // A certified infeasible subproblem cannot yield a step. An
        // iteration-capped one still can: the inexact solution is handed to
        // the merit line search, which discards it if it fails to descend.
        if matches!(
            sol.status,
            SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible
        ) {
            break;
        }
        warm_y = Some(sol.y.clone());

        // Project the step target onto the input box: an iteration-capped
        // subproblem can hand back inputs slightly outside it, and accepting
        // those would leave an iterate later subproblems must first pay to
        // pull back in.
        let target: Vec<InputVec> = qp
            .decode(&sol.z)
            .inputs
            .iter()
            .map(|u| problem.input_box.clamp(u))
            .collect();
        let step_norm = target
            .iter()
            .zip(&current.inputs)
            .map(|(v, u)| (v - u).amax())
            .fold(0.0f64, f64::max);
        if step_norm <= settings.step_tolerance {
            converged = true;
            break;
        }

        // Backtrack along the step until the merit function decreases.
        let current_merit = merit(&current, settings.violation_weight);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_backtracks {
            let trial_inputs: Vec<InputVec> = current
                .inputs
                .iter()
                .zip(&target)
                .map(|(u, v)| u + alpha * (v - u))
                .collect();
            let trial = evaluate(problem, ball.as_ref(), trial_inputs);
            let decrease = 1e-12 * (1.0 + current_merit.abs());
            if merit(&trial, settings.violation_weight) <= current_merit - decrease {
                current = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        update_best(&mut best, &current);
    }

    update_best(&mut best, &current);
    Ok(SqpResult {
        feasible: best.violation_max <= FEASIBLE_TOL,
        inputs: best.inputs,
        states: best.states,
        cost: best.cost,
        violation: best.violation_max,
        terminal_slack: best.terminal_slack,
        iterations,
        qp_iterations,
        converged,
    })
}

/// Horizon tracking cost: masked quadratic state error per stage plus input
/// effort, terminal error weighted by `p_terminal`. The same expression the
/// condensed QP encodes, evaluated directly on a trajectory.
pub fn horizon_cost(
    states: &[StateVec],
    inputs: &[InputVec],
    q_diag: &StateVec,
    r_diag: &InputVec,
    mask: &[bool; NX],
    reference: &[StateVec],
    p_terminal: &StateMat,
) -> f64 {
    let n = inputs.len();
    let mut total = 0.0;
    for i in 0..n {
        let e = masked(&states[i], &reference[i], mask);
        total += (0..NX).map(|j| q_diag[j] * e[j] * e[j]).sum::<f64>();
        total += (0..NU)
            .map(|j| r_diag[j] * inputs[i][j] * inputs[i][j])
            .sum::<f64>();
    }
    let e = masked(&states[n], &reference[n], mask);
    total + (e.transpose() * p_terminal * e)[0]
}

fn masked(x: &StateVec, r: &StateVec, mask: &[bool; NX]) -> StateVec {
    StateVec::from_fn(|i, _| if mask[i] { x[i] - r[i] } else { 0.0 })
}

fn evaluate<M: Model>(
    problem: &SqpProblem<M>,
    ball: Option<&BallGeometry>,
    inputs: Vec<InputVec>,
) -> Iterate {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(problem.x0);
    for u in &inputs {
        let x = states.last().unwrap();
        states.push(problem.model.step(x, u));
    }
    let mut cost = horizon_cost(
        &states,
        &inputs,
        &problem.q_diag,
        &problem.r_diag,
        &problem.mask,
        problem.reference,
        &problem.p_terminal,
    );
    let mut violation_sum = 0.0;
    let mut violation_max = 0.0f64;
    for i in 1..states.len() {
        let v = problem.state_boxes[i].violation(&states[i]);
        violation_sum += v;
        violation_max = violation_max.max(v);
    }
    let mut terminal_slack = 0.0;
    if let Some(ball) = ball {
        let n = inputs.len();
        let e_n = masked(&states[n], &problem.reference[n], &problem.mask);
        terminal_slack = ball.needed_slack(&e_n);
        if ball.hard {
            violation_sum += terminal_slack;
            violation_max = violation_max.max(terminal_slack);
        } else {
            cost += ball.slack_weight * terminal_slack;
        }
    }
    Iterate {
        inputs,
        states,
        cost,
        violation_sum,
        violation_max,
        terminal_slack,
    }
}

fn merit(it: &Iterate, violation_weight: f64) -> f64 {
    it.cost + violation_weight * it.violation_sum
}

fn snapshot(it: &Iterate) -> Iterate {
    Iterate {
        inputs: it.inputs.clone(),
        states: it.states.clone(),
        cost: it.cost,
        violation_sum: it.violation_sum,
        violation_max: it.violation_max,
        terminal_slack: it.terminal_slack,
    }
}

/// Prefer feasible iterates by cost; among infeasible ones, less violation.
fn update_best(best: &mut Iterate, candidate: &Iterate) {
    let best_feasible = best.violation_max <= FEASIBLE_TOL;
    let cand_feasible = candidate.violation_max <= FEASIBLE_TOL;
    let better = match (best_feasible, cand_feasible) {
        (true, true) => candidate.cost < best.cost,
        (true, false) => false,
        (false, true) => true,
        (false, false) => candidate.violation_sum < best.violation_sum,
    };
    if better {
        *best = snapshot(candidate);
    }
}

fn stack(inputs: &[InputVec], has_slack: bool, slack: f64) -> DVector<f64> {
    let d = NU * inputs.len() + usize::from(has_slack);
    DVector::from_fn(d, |i, _| {
        if i < NU * inputs.len() {
            inputs[i / NU][i % NU]
        } else {
            slack
        }
    })
}
