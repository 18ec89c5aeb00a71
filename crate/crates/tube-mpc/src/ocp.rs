//! Optimal control problem assembly.
//!
//! Two problem shapes cover every controller in this crate:
//!
//! * [`NonlinearOcp`]: a finite-horizon tracking problem over the true arm
//!   dynamics, solved by SQP from a measured state. This is what a
//!   conventional MPC loop solves.
//! * [`LinearOcp`]: the solve-ahead variant. The dynamics are a frozen
//!   affine model valid near the planned trajectory, the initial state is a
//!   *predicted* future state, the state boxes are tightened step by step
//!   against disturbance growth, and the terminal error is confined to a
//!   softened ball. Because the model is affine the whole problem condenses
//!   to one QP that can be solved before its plan is needed.
//!
//! Both share the cost convention: masked quadratic tracking error plus
//! input effort per stage, terminal error weighted by the value matrix of
//! the local feedback gains.

use crate::gains::CostWeights;
use crate::linearize::LinearizedModel;
use crate::plant::{ArmParams, Bounds};
use crate::solver::admm::{AdmmSolver, WarmStart};
use crate::solver::condense::{condense, AffineStep, CondensedQp, TerminalBall};
use crate::solver::sqp::{self, Model, SqpProblem, SqpResult, SqpSettings};
use crate::solver::{QpProblem, QpSolution, SolveError, SolveStatus};
use crate::tube::{TubeError, TubeProfile};
use crate::{InputVec, StateMat, StateVec, NU, NX};
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OcpError {
    #[error("reference window must have {expected} states, got {got}")]
    BadReference { expected: usize, got: usize },
    #[error("initial state violates the state box at coordinate {0}")]
    InitialStateOutsideBox(usize),
    #[error("terminal radius must be positive and finite, got {0}")]
    BadTerminalRadius(f64),
    #[error("tube tightening failed: {0}")]
    Tube(#[from] TubeError),
    #[error("problem assembly failed: {0}")]
    Assembly(#[from] SolveError),
    #[error("solve ended with status {0:?}")]
    SolveFailed(SolveStatus),
}

/// Tracking target: a sequence of reference states plus the coordinates the
/// cost actually compares. Untracked coordinates are free.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub states: Vec<StateVec>,
    pub mask: [bool; NX],
}

/// Track end-effector position only.
pub const POSITION_MASK: [bool; NX] = [true, true, false, false, false];

impl Reference {
    /// Hold a fixed end-effector position.
    pub fn constant_position(x: f64, y: f64, len: usize) -> Self {
        Self {
            states: vec![StateVec::new(x, y, 0.0, 0.0, 0.0); len.max(1)],
            mask: POSITION_MASK,
        }
    }

    /// Position waypoints in order; angles are untracked.
    pub fn position_path(points: &[(f64, f64)]) -> Self {
        Self {
            states: points
                .iter()
                .map(|&(x, y)| StateVec::new(x, y, 0.0, 0.0, 0.0))
                .collect(),
            mask: POSITION_MASK,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Reference state at an absolute step, holding the final value forever.
    pub fn at(&self, step: usize) -> StateVec {
        self.states[step.min(self.states.len() - 1)]
    }

    /// The `n + 1` reference states covering steps `start ..= start + n`,
    /// as a reference of its own.
    pub fn window(&self, start: usize, n: usize) -> Reference {
        Reference {
            states: (0..=n).map(|i| self.at(start + i)).collect(),
            mask: self.mask,
        }
    }
}

/// One-stage tracking cost `x_err' Q x_err + u' R u`. The error is expected
/// to be masked already (untracked coordinates zeroed).
pub fn stage_cost(x_err: &StateVec, u: &InputVec, weights: &CostWeights) -> f64 {
    (0..NX).map(|i| weights.q[i] * x_err[i] * x_err[i]).sum::<f64>()
        + (0..NU).map(|i| weights.r[i] * u[i] * u[i]).sum::<f64>()
}

/// Total cost of a trajectory against a reference window: stage costs for
/// steps `0..n`, terminal error weighted by `p_terminal`.
pub fn horizon_cost(
    states: &[StateVec],
    inputs: &[InputVec],
    reference: &[StateVec],
    mask: &[bool; NX],
    weights: &CostWeights,
    p_terminal: &StateMat,
) -> f64 {
    sqp::horizon_cost(
        states,
        inputs,
        &weights.q,
        &weights.r,
        mask,
        reference,
        p_terminal,
    )
}

/// Terminal-error ball: radius in the norm of the terminal weight, enforced
/// exactly or through a penalized slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalSpec {
    pub radius: f64,
    pub hard: bool,
}

/// The arm as a one-step prediction model (forward Euler), relinearized
/// wherever the SQP asks.
#[derive(Debug, Clone)]
pub struct ArmStepModel {
    pub params: ArmParams,
    pub dt: f64,
}

impl Model for ArmStepModel {
    fn step(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.params.step_nominal(x, u, self.dt)
    }

    fn linearize_step(&self, x: &StateVec, u: &InputVec) -> AffineStep {
        let m = crate::linearize::linearize(&self.params, x, u, self.dt);
        AffineStep {
            a: m.a,
            b: m.b,
            c: m.offset,
        }
    }
}

/// Finite-horizon tracking over the nonlinear arm, solved from a measured
/// state by SQP. Owns all of its data so controllers can keep one around.
#[derive(Debug, Clone)]
pub struct NonlinearOcp {
    pub model: ArmStepModel,
    pub x0: StateVec,
    pub weights: CostWeights,
    /// Reference window, horizon + 1 states.
    pub reference: Reference,
    pub p_terminal: StateMat,
    /// Per-step state boxes, horizon + 1 entries; index 0 is where `x0`
    /// must already live.
    pub state_boxes: Vec<Bounds<NX>>,
    pub input_box: Bounds<NU>,
    pub terminal: Option<TerminalSpec>,
}

impl NonlinearOcp {
    pub fn build(
        params: &ArmParams,
        dt: f64,
        x0: StateVec,
        profile: &TubeProfile,
        weights: &CostWeights,
        reference: Reference,
        p_terminal: StateMat,
        terminal: Option<TerminalSpec>,
    ) -> Result<Self, OcpError> {
        let n = profile.state_boxes.len() - 1;
        if reference.len() != n + 1 {
            return Err(OcpError::BadReference {
                expected: n + 1,
                got: reference.len(),
            });
        }
        for i in 0..NX {
            if x0[i] < profile.state_boxes[0].lower[i] - 1e-9
                || x0[i] > profile.state_boxes[0].upper[i] + 1e-9
            {
                return Err(OcpError::InitialStateOutsideBox(i));
            }
        }
        if let Some(t) = &terminal {
            if !(t.radius.is_finite() && t.radius > 0.0) {
                return Err(OcpError::BadTerminalRadius(t.radius));
            }
        }
        Ok(Self {
            model: ArmStepModel {
                params: params.clone(),
                dt,
            },
            x0,
            weights: weights.clone(),
            reference,
            p_terminal,
            state_boxes: profile.state_boxes.clone(),
            input_box: profile.input_box,
            terminal,
        })
    }

    pub fn horizon(&self) -> usize {
        self.reference.len() - 1
    }

    pub fn solve(
        &self,
        solver: &AdmmSolver,
        settings: &SqpSettings,
        initial_inputs: Option<&[InputVec]>,
    ) -> Result<SqpResult, OcpError> {
        let problem = SqpProblem {
            model: &self.model,
            x0: self.x0,
            q_diag: self.weights.q,
            r_diag: self.weights.r,
            mask: self.reference.mask,
            reference: &self.reference.states,
            p_terminal: self.p_terminal,
            state_boxes: &self.state_boxes,
            input_box: self.input_box,
            terminal_ball: self.terminal.map(|t| TerminalBall {
                epsilon: t.radius,
                slack_weight: self.weights.slack_weight,
                hard: t.hard,
            }),
        };
        let result = sqp::solve_sqp(&problem, solver, settings, initial_inputs)?;
        Ok(result)
    }
}

/// The solve-ahead problem: affine model, predicted initial state, tightened
/// boxes, softened terminal ball. Condensed once at build time.
#[derive(Debug, Clone)]
pub struct LinearOcp {
    condensed: CondensedQp,
    model_step: AffineStep,
    pub horizon: usize,
    /// Reference window the cost was built against.
    pub reference: Reference,
}

/// A solved plan: inputs, predicted states, the modeled cost, and how much
/// terminal slack the solution needed.
#[derive(Debug, Clone)]
pub struct PlanSolution {
    pub inputs: Vec<InputVec>,
    /// Predicted states under the affine model, horizon + 1 entries.
    pub states: Vec<StateVec>,
    pub cost: f64,
    pub slack: f64,
    pub qp: QpSolution,
}

impl LinearOcp {
    pub fn build(
        model: &LinearizedModel,
        initial_state: StateVec,
        profile: &TubeProfile,
        weights: &CostWeights,
        p_terminal: StateMat,
        reference: Reference,
        terminal: &TerminalSpec,
    ) -> Result<Self, OcpError> {
        let n = profile.state_boxes.len() - 1;
        if n == 0 {
            return Err(OcpError::Assembly(SolveError::Dimension("empty horizon")));
        }
        if reference.len() != n + 1 {
            return Err(OcpError::BadReference {
                expected: n + 1,
                got: reference.len(),
            });
        }
        if !(terminal.radius.is_finite() && terminal.radius > 0.0) {
            return Err(OcpError::BadTerminalRadius(terminal.radius));
        }
        let step = AffineStep {
            a: model.a,
            b: model.b,
            c: model.offset,
        };
        let steps = vec![step; n];
        let condensed = condense(&crate::solver::condense::CondenseInputs {
            x0: initial_state,
            steps: &steps,
            q_diag: weights.q,
            r_diag: weights.r,
            mask: reference.mask,
            reference: &reference.states,
            p_terminal,
            state_boxes: &profile.state_boxes,
            input_box: profile.input_box,
            terminal_ball: Some(TerminalBall {
                epsilon: terminal.radius,
                slack_weight: weights.slack_weight,
                hard: terminal.hard,
            }),
        })?;
        Ok(Self {
            condensed,
            model_step: step,
            horizon: n,
            reference,
        })
    }

    pub fn problem(&self) -> &QpProblem {
        &self.condensed.problem
    }

    /// Decision vector layout: stacked inputs then the terminal slack.
    pub fn num_vars(&self) -> usize {
        self.condensed.problem.num_vars()
    }

    /// Stack a candidate plan into a warm-start vector for this problem.
    pub fn warm_vector(&self, inputs: &[InputVec], slack: f64) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        for (j, u) in inputs.iter().take(self.horizon).enumerate() {
            for a in 0..NU {
                z[NU * j + a] = u[a];
            }
        }
        z[NU * self.horizon] = slack;
        z
    }

    pub fn solve(
        &self,
        solver: &AdmmSolver,
        warm: &WarmStart,
    ) -> Result<PlanSolution, OcpError> {
        let qp = solver.solve_warm(&self.condensed.problem, warm)?;
        if qp.status != SolveStatus::Solved {
            return Err(OcpError::SolveFailed(qp.status));
        }
        let plan = self.condensed.decode(&qp.z);
        Ok(PlanSolution {
            inputs: plan.inputs,
            states: plan.states,
            cost: qp.objective,
            slack: plan.slack,
            qp,
        })
    }

    /// One step of the affine model this problem was built on.
    pub fn predict(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.model_step.a * x + self.model_step.b * u + self.model_step.c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gains::{synthesize, terminal_radius};
    use crate::linearize::linearize;
    use crate::solver::admm::AdmmSettings;
    use crate::tube::{deviation_bound, growth_factor, TubeSettings};
    use approx::assert_relative_eq;

    #[test]
    fn stage_cost_matches_hand_computation() {
        let weights = CostWeights::benchmark();
        let e1 = StateVec::new(1.0, 0.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(stage_cost(&e1, &InputVec::zeros(), &weights), 0.1);
        let u = InputVec::new(0.1, 0.0, 0.0);
        assert_relative_eq!(stage_cost(&e1, &u, &weights), 0.1 + 0.01 * 0.01);
    }

    #[test]
    fn horizon_cost_is_sum_of_stages_plus_terminal() {
        let weights = CostWeights::benchmark();
        let mask = POSITION_MASK;
        let states = vec![
            StateVec::new(0.0, 4.0, 2.6, 2.0, 0.3),
            StateVec::new(0.1, 4.1, 2.6, 2.0, 0.3),
            StateVec::new(0.3, 4.2, 2.7, 2.1, 0.4),
        ];
        let inputs = vec![InputVec::new(0.1, -0.1, 0.0), InputVec::new(0.0, 0.2, 0.1)];
        let reference = vec![StateVec::new(1.0, 5.0, 0.0, 0.0, 0.0); 3];
        let p = StateMat::identity() * 2.0;

        let mut expected = 0.0;
        for i in 0..2 {
            let e = StateVec::from_fn(|j, _| {
                if mask[j] {
                    states[i][j] - reference[i][j]
                } else {
                    0.0
                }
            });
            expected += stage_cost(&e, &inputs[i], &weights);
        }
        let e = StateVec::from_fn(|j, _| {
            if mask[j] {
                states[2][j] - reference[2][j]
            } else {
                0.0
            }
        });
        expected += (e.transpose() * p * e)[0];

        let got = horizon_cost(&states, &inputs, &reference, &mask, &weights, &p);
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn reference_window_holds_last_state() {
        let r = Reference::position_path(&[(0.0, 4.0), (1.0, 5.0), (2.0, 6.0)]);
        assert_eq!(r.at(0)[0], 0.0);
        assert_eq!(r.at(2)[0], 2.0);
        assert_eq!(r.at(99)[0], 2.0);
        let w = r.window(1, 4);
        assert_eq!(w.len(), 5);
        assert_eq!(w.states[0][0], 1.0);
        assert_eq!(w.states[1][0], 2.0);
        assert_eq!(w.states[4][0], 2.0);
        assert_eq!(w.mask, POSITION_MASK);
    }

    /// Everything the solve-ahead problem needs at the rest anchor.
    struct Pipeline {
        params: ArmParams,
        x0: StateVec,
        weights: CostWeights,
        model: LinearizedModel,
        profile: TubeProfile,
        gains: crate::gains::GainSet,
        epsilon: f64,
    }

    fn pipeline(horizon: usize) -> Pipeline {
        let params = ArmParams::benchmark();
        let x0 = ArmParams::benchmark_initial_state();
        let weights = CostWeights::benchmark();
        let dt = 0.1;

        // Gains come from a gently excited anchor; the model itself is
        // anchored at rest where the discrete map is exactly the identity.
        // Too weak a probe leaves the pair barely stabilizable and the
        // Riccati solution blows up, which the solver then pays for.
        let probe = InputVec::from_element(0.05);
        let gain_model = linearize(&params, &x0, &probe, dt);
        let gains = synthesize(&gain_model.a, &gain_model.b, &weights).unwrap();

        let model = linearize(&params, &x0, &InputVec::zeros(), dt);
        let (l1, _) = params.lipschitz_constants(&params.state_box, &params.input_box);
        let lambda = growth_factor(&model.a, l1, dt);
        let settings = TubeSettings {
            eta_state: params.eta1,
            l_state: 0.0,
            handoff_radius: deviation_bound(lambda, 3, params.eta1),
        };
        let profile = TubeProfile::build(
            lambda,
            params.eta1,
            horizon,
            &params.state_box,
            &params.input_box,
            &gains.k,
            &settings,
        )
        .unwrap();

        // Terminal radius in error coordinates around the anchor pose.
        let error_box = Bounds::new(
            params.state_box.lower - x0,
            params.state_box.upper - x0,
        )
        .unwrap();
        let epsilon =
            terminal_radius(&gains, &profile.input_box, &error_box, 10.0, 500, 42).unwrap();

        Pipeline {
            params,
            x0,
            weights,
            model,
            profile,
            gains,
            epsilon,
        }
    }

    #[test]
    fn rest_anchor_discretizes_to_identity() {
        let p = pipeline(5);
        assert_eq!(p.model.a, StateMat::identity());
        assert_eq!(p.model.offset, StateVec::zeros());
        assert!(p.epsilon > 1e-3, "terminal radius {}", p.epsilon);
    }

    #[test]
    fn solve_ahead_problem_has_expected_shape() {
        let n = 30;
        let p = pipeline(n);
        let reference = Reference::constant_position(2.0, 6.0, 1).window(0, n);
        let ocp = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            reference,
            &TerminalSpec {
                radius: p.epsilon,
                hard: false,
            },
        )
        .unwrap();
        // Inputs plus one slack variable.
        assert_eq!(ocp.num_vars(), 3 * n + 1);
        // Input rows, angle rows (positions are unbounded), two rows per
        // tracked terminal eigendirection, one slack bound.
        assert_eq!(
            ocp.problem().num_constraints(),
            3 * n + 3 * n + 2 * 2 + 1
        );
    }

    #[test]
    fn solve_ahead_plan_approaches_target_and_replays() {
        let n = 30;
        let p = pipeline(n);
        let reference = Reference::constant_position(2.0, 6.0, 1).window(0, n);
        let ocp = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            reference,
            &TerminalSpec {
                radius: p.epsilon,
                hard: false,
            },
        )
        .unwrap();
        let solver = AdmmSolver::new(AdmmSettings::default());
        let plan = ocp.solve(&solver, &WarmStart::default()).unwrap();

        assert!(plan.qp.residuals.within(1e-6), "{:?}", plan.qp.residuals);
        assert_eq!(plan.inputs.len(), n);
        assert_eq!(plan.states.len(), n + 1);

        // Predicted motion closes a good part of the gap.  The Jacobian is
        // frozen at the start pose, so the plan cannot steer straight at the
        // target; repeated relinearisation (the SQP path) is what closes the
        // rest.
        let start_err = (p.x0.fixed_rows::<2>(0) - nalgebra::Vector2::new(2.0, 6.0)).norm();
        let end = plan.states[n];
        let end_err = (end.fixed_rows::<2>(0) - nalgebra::Vector2::new(2.0, 6.0)).norm();
        assert!(
            end_err < 0.65 * start_err,
            "end error {end_err} vs start {start_err}"
        );

        // Decoded states are exactly the affine replay of the inputs.
        for i in 0..n {
            let predicted = ocp.predict(&plan.states[i], &plan.inputs[i]);
            assert_relative_eq!(
                (predicted - plan.states[i + 1]).norm(),
                0.0,
                epsilon = 1e-12
            );
            assert!(p.profile.input_box.contains_with_tol(&plan.inputs[i], 1e-7));
            assert!(p.profile.state_boxes[i + 1].contains_with_tol(&plan.states[i + 1], 1e-6));
        }
        // The target ball is out of reach for the frozen model, so the soft
        // terminal constraint spills into slack -- but never by more than the
        // slack accounts for.
        let mut terminal_err = end - ocp.reference.at(n);
        terminal_err[2] = 0.0;
        terminal_err[3] = 0.0;
        terminal_err[4] = 0.0;
        let weighted = (terminal_err.transpose() * p.gains.p * terminal_err)[(0, 0)].sqrt();
        assert!(plan.slack > 0.0, "slack {}", plan.slack);
        assert!(
            weighted <= p.epsilon + 2.0_f64.sqrt() * plan.slack + 1e-6,
            "weighted terminal error {weighted} vs epsilon {} + slack {}",
            p.epsilon,
            plan.slack
        );
        assert!(plan.cost > 0.0);
    }

    #[test]
    fn warm_vector_reproduces_a_plan() {
        let n = 8;
        let p = pipeline(n);
        let reference = Reference::constant_position(1.0, 5.0, 1).window(0, n);
        let ocp = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            reference,
            &TerminalSpec {
                radius: p.epsilon,
                hard: false,
            },
        )
        .unwrap();
        let solver = AdmmSolver::new(AdmmSettings::default());
        let cold = ocp.solve(&solver, &WarmStart::default()).unwrap();
        let warm = ocp
            .solve(
                &solver,
                &WarmStart {
                    z: Some(ocp.warm_vector(&cold.inputs, cold.slack)),
                    y: Some(cold.qp.y.clone()),
                },
            )
            .unwrap();
        assert!(
            warm.qp.iterations * 5 <= cold.qp.iterations,
            "warm {} vs cold {}",
            warm.qp.iterations,
            cold.qp.iterations
        );
        assert_relative_eq!(warm.cost, cold.cost, epsilon = 1e-6);
    }

    #[test]
    fn reference_at_current_position_costs_nothing() {
        let n = 12;
        let p = pipeline(n);
        let reference = Reference::constant_position(p.x0[0], p.x0[1], 1).window(0, n);
        let ocp = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            reference,
            &TerminalSpec {
                radius: p.epsilon,
                hard: false,
            },
        )
        .unwrap();
        let solver = AdmmSolver::new(AdmmSettings::default());
        let plan = ocp.solve(&solver, &WarmStart::default()).unwrap();
        // Already on the reference: doing nothing is optimal.
        assert!(plan.cost.abs() < 1e-9, "cost {}", plan.cost);
        assert!(plan.slack < 1e-9, "slack {}", plan.slack);
        for u in &plan.inputs {
            assert!(u.amax() < 1e-6, "input {u}");
        }
    }

    #[test]
    fn cost_never_increases_when_the_input_box_grows() {
        let n = 20;
        let p = pipeline(n);
        let mut costs = Vec::new();
        for scale in [0.25, 0.5, 1.0] {
            let mut profile = p.profile.clone();
            profile.input_box = Bounds::new(
                p.profile.input_box.lower * scale,
                p.profile.input_box.upper * scale,
            )
            .unwrap();
            let reference = Reference::constant_position(2.0, 6.0, 1).window(0, n);
            let ocp = LinearOcp::build(
                &p.model,
                p.x0,
                &profile,
                &p.weights,
                p.gains.p,
                reference,
                &TerminalSpec {
                    radius: p.epsilon,
                    hard: false,
                },
            )
            .unwrap();
            let solver = AdmmSolver::new(AdmmSettings::default());
            let plan = ocp.solve(&solver, &WarmStart::default()).unwrap();
            costs.push(plan.cost);
        }
        assert!(
            costs[0] >= costs[1] - 1e-6 && costs[1] >= costs[2] - 1e-6,
            "costs {costs:?}"
        );
        // The box binds on this far target, so growth genuinely helps.
        assert!(costs[0] > costs[2] + 1e-3, "costs {costs:?}");
    }

    #[test]
    fn unreachable_hard_terminal_is_reported_infeasible() {
        let n = 5;
        let p = pipeline(n);
        let reference = Reference::constant_position(9.0, 9.0, 1).window(0, n);
        let ocp = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            reference,
            &TerminalSpec {
                radius: 1e-4,
                hard: true,
            },
        )
        .unwrap();
        let solver = AdmmSolver::new(AdmmSettings::default());
        let err = ocp.solve(&solver, &WarmStart::default()).unwrap_err();
        assert_eq!(err, OcpError::SolveFailed(SolveStatus::PrimalInfeasible));
    }

    #[test]
    fn builders_validate_their_inputs() {
        let n = 5;
        let p = pipeline(n);
        let short = Reference::constant_position(2.0, 6.0, 1).window(0, n - 1);
        let err = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            short,
            &TerminalSpec {
                radius: p.epsilon,
                hard: false,
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            OcpError::BadReference {
                expected: n + 1,
                got: n
            }
        );

        let reference = Reference::constant_position(2.0, 6.0, 1).window(0, n);
        let err = LinearOcp::build(
            &p.model,
            p.x0,
            &p.profile,
            &p.weights,
            p.gains.p,
            reference,
            &TerminalSpec {
                radius: 0.0,
                hard: false,
            },
        )
        .unwrap_err();
        assert_eq!(err, OcpError::BadTerminalRadius(0.0));

        // A state pinned outside its box cannot start a nonlinear solve.
        let mut outside = p.x0;
        outside[2] = 0.1;
        let err = NonlinearOcp::build(
            &p.params,
            0.1,
            outside,
            &p.profile,
            &p.weights,
            Reference::constant_position(2.0, 6.0, 1).window(0, n),
            p.gains.p,
            None,
        )
        .unwrap_err();
        assert_eq!(err, OcpError::InitialStateOutsideBox(2));
    }

    #[test]
    fn nonlinear_problem_solves_from_measured_state() {
        let n = 8;
        let p = pipeline(n);
        let reference = Reference::constant_position(2.0, 6.0, 1).window(0, n);
        let ocp = NonlinearOcp::build(
            &p.params,
            0.1,
            p.x0,
            &p.profile,
            &p.weights,
            reference,
            p.gains.p,
            Some(TerminalSpec {
                radius: p.epsilon,
                hard: false,
            }),
        )
        .unwrap();
        let solver = AdmmSolver::new(AdmmSettings::default());
        let result = ocp
            .solve(&solver, &SqpSettings::default(), None)
            .unwrap();
        assert!(result.converged);
        assert!(result.feasible, "violation {}", result.violation);
        // The plan moves the end effector toward the target.
        let start = (p.x0[0] - 2.0).hypot(p.x0[1] - 6.0);
        let last = result.states[n];
        let end = (last[0] - 2.0).hypot(last[1] - 6.0);
        assert!(end < start, "end {end} vs start {start}");
    }
}
