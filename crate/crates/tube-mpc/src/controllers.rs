//! The three closed-loop policies the benchmark compares.
//!
//! * [`IdealController`] solves the full nonlinear tracking problem from the
//!   measured state at every substep and applies the first input in the same
//!   instant. No computation delay: this is the performance ceiling.
//! * [`TriggeredController`] runs the same solve, but each plan only takes
//!   effect a fixed number of substeps after the state it was computed from
//!   was measured, and plays open loop until the next plan lands. This is
//!   the worst-case-delay floor.
//! * [`SmoothController`] plans ahead instead of waiting. While the stored
//!   plan plays out under local feedback, it predicts where the loop will be
//!   when the compute window closes, solves the linearized solve-ahead
//!   problem from that predicted state, and swaps plans exactly when the
//!   window ends. Every substep gets a planned input; there are no hold
//!   gaps.
//!
//! Controllers are state machines: the simulator advances them one substep
//! at a time with the measured state, and the compute delay is accounted in
//! those substeps, never in wall-clock time, so runs are reproducible.

use crate::gains::{synthesize, terminal_radius, GainError, GainSet};
use crate::linearize::{linearize, LinearizedModel};
use crate::ocp::{LinearOcp, NonlinearOcp, OcpError, Reference, TerminalSpec};
use crate::plant::{ArmParams, Bounds, PlantError};
use crate::solver::admm::{AdmmSolver, WarmStart};
use crate::solver::sqp::SqpSettings;
use crate::tube::{deviation_bound, growth_factor, TubeError, TubeProfile, TubeSettings};
use crate::{GainMat, InputVec, StateMat, StateVec, NU};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;
use thiserror::Error;

/// Input anchor used for gain synthesis, always a uniform gentle excitation.
/// At rest the discrete pair is only marginally stabilizable and the Riccati
/// solution degrades, while mixed-sign plan inputs can stiffen the gains
/// several-fold — enough that the input authority reserved for the feedback
/// correction (|K| times the tube radius) would exceed the whole input box.
const GAIN_PROBE: f64 = 0.05;
/// Terminal-radius search: cap, sample count, and sampling seed.
const EPSILON_CAP: f64 = 10.0;
const EPSILON_SAMPLES: usize = 500;
const EPSILON_SEED: u64 = 42;

/// Event bits attached to each substep record.
pub const EVENT_SOLVE: u8 = 1;
/// A freshly computed plan took over at this substep.
pub const EVENT_HANDOFF: u8 = 2;
/// The commanded input was clipped to the input box.
pub const EVENT_SATURATION: u8 = 4;
/// A solve failed and the controller kept its previous plan.
pub const EVENT_FALLBACK: u8 = 8;
/// No plan covers this substep; a hold input was emitted.
pub const EVENT_HOLD: u8 = 16;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("prediction horizon must be at least one step")]
    EmptyHorizon,
    #[error("reference must contain at least one state")]
    EmptyReference,
    #[error("compute window must be at least one step")]
    ZeroComputeWindow,
    #[error("compute window of {delay} steps exceeds the {horizon}-step horizon")]
    DelayExceedsHorizon { delay: usize, horizon: usize },
    #[error("controller expected substep {expected}, got {got}")]
    OutOfOrderStep { expected: usize, got: usize },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("gain synthesis failed: {0}")]
    Gain(#[from] GainError),
    #[error("tube construction failed: {0}")]
    Tube(#[from] TubeError),
    #[error("plan solve failed: {0}")]
    Ocp(#[from] OcpError),
}

/// Which problem shape a solve record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveKind {
    /// Condensed solve-ahead QP (single linearization).
    Qp,
    /// Full nonlinear problem via SQP.
    Sqp,
}

/// One optimization run, logged for the timing table.
#[derive(Debug, Clone, Copy)]
pub struct SolveRecord {
    /// Substep at which the solve was started.
    pub t_index: usize,
    pub kind: SolveKind,
    /// Whether the result was accepted as a plan.
    pub solved: bool,
    /// Inner QP iterations (summed over SQP subproblems where applicable).
    pub iterations: usize,
    /// Wall-clock duration. Never feeds back into the control path; the
    /// simulated delay is counted in substeps.
    pub solve_time_s: f64,
}

/// One plan swap of the smooth controller, logged for containment checks.
#[derive(Debug, Clone, Copy)]
pub struct HandoffRecord {
    /// Substep at which the new plan took over.
    pub t_index: usize,
    /// Predicted state the new plan starts from.
    pub center: StateVec,
    /// Certified bound on how far the realized state can be from `center`.
    pub radius: f64,
    /// Substep whose measurement the plan was computed from; `None` for the
    /// offline bootstrap plan.
    pub decided_at: Option<usize>,
}

/// What a controller hands the simulator for one substep.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Input to apply over this substep; always inside the input box.
    pub input: InputVec,
    /// The controller's nominal state for this substep (feedback center for
    /// the smooth controller, plan prediction otherwise).
    pub nominal: StateVec,
    pub flags: u8,
}

/// A stored input plan with the nominal trajectory it was planned along.
///
/// Past its explicit entries the plan continues with zero input, which for
/// this plant holds the final nominal state exactly; accessors implement
/// that continuation so a controller that misses several replans degrades
/// into station keeping instead of running off the end of a buffer.
#[derive(Debug, Clone)]
pub struct PlanBuffer {
    pub inputs: Vec<InputVec>,
    /// Nonlinear rollout of `inputs` from the plan's initial state,
    /// `inputs.len() + 1` entries.
    pub nominal_states: Vec<StateVec>,
    /// Absolute substep index of `nominal_states[0]`.
    pub anchor_time: usize,
    /// Ancillary feedback gain active while this plan is applied.
    pub gain: GainMat,
    /// Substep whose measurement the plan was computed from; `None` for a
    /// plan computed offline before the run.
    pub decided_at: Option<usize>,
}

impl PlanBuffer {
    fn offset(&self, t: usize) -> usize {
        t.checked_sub(self.anchor_time)
            .expect("plan queried before its anchor time")
    }

    /// Planned input at absolute substep `t`; zero past the stored entries.
    pub fn input_at(&self, t: usize) -> InputVec {
        self.inputs
            .get(self.offset(t))
            .copied()
            .unwrap_or_else(InputVec::zeros)
    }

    /// Nominal state at absolute substep `t`; the final state is held past
    /// the stored entries (the zero-input continuation is stationary).
    pub fn nominal_at(&self, t: usize) -> StateVec {
        let i = self.offset(t).min(self.nominal_states.len() - 1);
        self.nominal_states[i]
    }

    /// Whether explicit plan entries cover `steps` substeps from `t`.
    pub fn covers(&self, t: usize, steps: usize) -> bool {
        t >= self.anchor_time && self.offset(t) + steps <= self.inputs.len()
    }
}

/// How input delivery behaves while a solve is pending.
///
/// With the fixed, step-counted compute delay used here the two policies
/// coincide: a plan triggered at `t` is ready exactly at `t + compute_steps`,
/// which is also the moment the previous plan's scheduled portion runs out.
/// The distinction only matters for variable delays, which this benchmark
/// deliberately excludes to stay deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldPolicy {
    /// Keep following the previous plan until the scheduled switch instant.
    BlockAndHold,
    /// Switch to the new plan the moment it is ready.
    ApplyWhenReady,
}

/// Fixed computation delay, counted in substeps of virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayModel {
    /// Substeps a solve takes to complete. Zero collapses the delay
    /// entirely and makes the triggered controller coincide with the ideal
    /// one.
    pub compute_steps: usize,
    pub policy: HoldPolicy,
}

impl DelayModel {
    pub fn new(compute_steps: usize, policy: HoldPolicy) -> Self {
        Self {
            compute_steps,
            policy,
        }
    }

    /// Substeps between consecutive solve triggers (at least one).
    pub fn period(&self) -> usize {
        self.compute_steps.max(1)
    }
}

/// Nominal input with local feedback, saturated to the input box:
/// `u = v + K (x - x_star)`, then clamped. Returns the applied input and
/// whether clamping changed it.
pub fn tube_feedback_input(
    v: &InputVec,
    k: &GainMat,
    x: &StateVec,
    x_star: &StateVec,
    input_box: &Bounds<NU>,
) -> (InputVec, bool) {
    let raw = v + k * (x - x_star);
    let clamped = input_box.clamp(&raw);
    (clamped, clamped != raw)
}

/// Nonlinear rollout of an input plan from `x0`; `inputs.len() + 1` states.
pub fn nominal_rollout(p: &ArmParams, dt: f64, x0: &StateVec, inputs: &[InputVec]) -> Vec<StateVec> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut x = *x0;
    states.push(x);
    for u in inputs {
        x = p.step_nominal(&x, u, dt);
        states.push(x);
    }
    states
}

/// Everything the controllers share: plant, cost, reference, and solver
/// settings. Windows of `reference` are cut per solve; the final reference
/// state holds forever, so a short reference describes a set-point task.
#[derive(Debug, Clone)]
pub struct ControlContext {
    pub params: ArmParams,
    /// Substep length in seconds.
    pub dt: f64,
    /// Prediction horizon in steps.
    pub horizon: usize,
    pub weights: crate::gains::CostWeights,
    pub reference: Reference,
    pub admm: crate::solver::admm::AdmmSettings,
    pub sqp: SqpSettings,
    /// Enforce the terminal ball exactly instead of through a slack penalty.
    pub hard_terminal: bool,
}

impl ControlContext {
    /// The benchmark arm and weights around a given reference.
    pub fn benchmark(reference: Reference) -> Self {
        Self {
            params: ArmParams::benchmark(),
            dt: 0.1,
            horizon: 30,
            weights: crate::gains::CostWeights::benchmark(),
            reference,
            admm: crate::solver::admm::AdmmSettings::default(),
            sqp: SqpSettings::default(),
            hard_terminal: false,
        }
    }

    fn validate(&self) -> Result<(), ControllerError> {
        if self.horizon == 0 {
            return Err(ControllerError::EmptyHorizon);
        }
        if self.reference.is_empty() {
            return Err(ControllerError::EmptyReference);
        }
        Ok(())
    }
}

/// Closed-loop policy interface the simulator drives.
pub trait Controller {
    /// Stable identifier used in file names and reports.
    fn name(&self) -> &'static str;

    /// Observe the measured state at substep `t` (consecutive from zero)
    /// and return the input to apply over `[t, t+1)`.
    fn step(&mut self, t: usize, x: &StateVec) -> Result<StepOutput, ControllerError>;

    /// Optimization runs so far, in trigger order.
    fn solves(&self) -> &[SolveRecord];

    /// Plan swaps with containment data; empty for controllers that do not
    /// maintain a tube.
    fn handoffs(&self) -> &[HandoffRecord];
}

/// Design data every controller derives once from the initial state.
struct DesignBasis {
    gains: GainSet,
    /// Affine step model anchored at rest, where the plan bootstraps.
    model: LinearizedModel,
    l1: f64,
    l2: f64,
    profile: TubeProfile,
    epsilon: f64,
}

/// Gains, tube profile, and terminal radius anchored at the initial pose.
///
/// `tube_window` selects the constraint treatment: `Some(m)` tightens the
/// boxes against disturbance growth over `m`-step compute windows (the
/// solve-ahead design), `None` leaves them untouched (the conventional
/// designs, which consume raw constraints).
fn design_basis(
    ctx: &ControlContext,
    x0: &StateVec,
    tube_window: Option<usize>,
) -> Result<DesignBasis, ControllerError> {
    let p = &ctx.params;
    let probe = InputVec::from_element(GAIN_PROBE);
    let gain_model = linearize(p, x0, &probe, ctx.dt);
    let gains = synthesize(&gain_model.a, &gain_model.b, &ctx.weights)?;

    let model = linearize(p, x0, &InputVec::zeros(), ctx.dt);
    let (l1, l2) = p.lipschitz_constants(&p.state_box, &p.input_box);
    let lambda = growth_factor(&model.a, l1, ctx.dt);
    let (eta, settings) = match tube_window {
        Some(m) => (
            p.eta1,
            TubeSettings {
                eta_state: p.eta1,
                l_state: 0.0,
                handoff_radius: deviation_bound(lambda, m, p.eta1),
            },
        ),
        None => (
            0.0,
            TubeSettings {
                eta_state: 0.0,
                l_state: 0.0,
                handoff_radius: 0.0,
            },
        ),
    };
    let profile = TubeProfile::build(
        lambda,
        eta,
        ctx.horizon,
        &p.state_box,
        &p.input_box,
        &gains.k,
        &settings,
    )?;

    // Terminal radius in error coordinates around the initial pose. Kept
    // for the whole run: recomputing it per solve would wobble the terminal
    // set between plans for no benefit, since the admissible error box
    // barely moves over the workspace the tasks visit.
    let error_box = Bounds::new(p.state_box.lower - x0, p.state_box.upper - x0)?;
    let epsilon = terminal_radius(
        &gains,
        &profile.input_box,
        &error_box,
        EPSILON_CAP,
        EPSILON_SAMPLES,
        EPSILON_SEED,
    )?;

    Ok(DesignBasis {
        gains,
        model,
        l1,
        l2,
        profile,
        epsilon,
    })
}

fn gain_norm(k: &GainMat) -> f64 {
    DMatrix::from_fn(NU, crate::NX, |i, j| k[(i, j)])
        .svd(false, false)
        .singular_values[0]
}

/// Shift a previous plan by `shift` steps and zero-pad to `n` entries.
fn shifted_warm(prev: Option<&[InputVec]>, shift: usize, n: usize) -> Option<Vec<InputVec>> {
    prev.map(|w| {
        (0..n)
            .map(|j| w.get(j + shift).copied().unwrap_or_else(InputVec::zeros))
            .collect()
    })
}

struct PendingPlan {
    buffer: PlanBuffer,
    /// Containment radius for the handoff this plan will make.
    radius: f64,
}

/// Solve-ahead controller: applies the stored plan under tube feedback
/// while concurrently (in virtual time) predicting the handoff state,
/// re-linearizing there, and solving the next plan as one QP.
pub struct SmoothController {
    ctx: ControlContext,
    solver: AdmmSolver,
    /// Substeps one solve occupies; plans take over exactly this far apart.
    compute_steps: usize,
    l1: f64,
    l2: f64,
    epsilon: f64,
    active: PlanBuffer,
    pending: Option<PendingPlan>,
    warm_slack: f64,
    warm_dual: Option<DVector<f64>>,
    solves: Vec<SolveRecord>,
    handoffs: Vec<HandoffRecord>,
    expect_t: usize,
}

impl SmoothController {
    /// Bootstrap offline: design gains and tube at the initial pose, solve
    /// the first plan from the exactly-known initial state, and arm it at
    /// substep zero.
    pub fn new(
        ctx: ControlContext,
        x0: StateVec,
        compute_steps: usize,
    ) -> Result<Self, ControllerError> {
        ctx.validate()?;
        if compute_steps == 0 {
            return Err(ControllerError::ZeroComputeWindow);
        }
        if compute_steps > ctx.horizon {
            return Err(ControllerError::DelayExceedsHorizon {
                delay: compute_steps,
                horizon: ctx.horizon,
            });
        }
        ArmParams::check_finite(&x0, &InputVec::zeros())?;

        let basis = design_basis(&ctx, &x0, Some(compute_steps))?;
        let solver = AdmmSolver::new(ctx.admm.clone());
        let started = Instant::now();
        let ocp = LinearOcp::build(
            &basis.model,
            x0,
            &basis.profile,
            &ctx.weights,
            basis.gains.p,
            ctx.reference.window(0, ctx.horizon),
            &TerminalSpec {
                radius: basis.epsilon,
                hard: ctx.hard_terminal,
            },
        )?;
        let sol = ocp.solve(&solver, &WarmStart::default())?;
        let solve_time_s = started.elapsed().as_secs_f64();

        let nominal_states = nominal_rollout(&ctx.params, ctx.dt, &x0, &sol.inputs);
        let active = PlanBuffer {
            inputs: sol.inputs,
            nominal_states,
            anchor_time: 0,
            gain: basis.gains.k,
            decided_at: None,
        };
        Ok(Self {
            ctx,
            solver,
            compute_steps,
            l1: basis.l1,
            l2: basis.l2,
            epsilon: basis.epsilon,
            active,
            pending: None,
            warm_slack: sol.slack,
            warm_dual: Some(sol.qp.y.clone()),
            solves: vec![SolveRecord {
                t_index: 0,
                kind: SolveKind::Qp,
                solved: true,
                iterations: sol.qp.iterations,
                solve_time_s,
            }],
            // The bootstrap plan starts from the exactly-known initial
            // state: its handoff has zero radius.
            handoffs: vec![HandoffRecord {
                t_index: 0,
                center: x0,
                radius: 0.0,
                decided_at: None,
            }],
            expect_t: 0,
        })
    }

    /// The plan currently being applied.
    pub fn plan(&self) -> &PlanBuffer {
        &self.active
    }

    /// Steps (ii)-(iv): predict the handoff state, redesign gains and tube
    /// there, and solve the next plan. Runs at trigger instants; the result
    /// takes over `compute_steps` later.
    fn plan_ahead(&mut self, t: usize, x: &StateVec) -> Result<(PendingPlan, usize), ControllerError> {
        let m = self.compute_steps;
        let ctx = &self.ctx;
        let p = &ctx.params;

        // Predict where the loop lands when this compute window closes by
        // running the stored plan forward under its own feedback law,
        // starting from the measured state. Starting from the measurement
        // (rather than continuing the old nominal) resets the prediction
        // error each window, so the handoff radius below never compounds.
        let mut ahead = *x;
        for i in t..t + m {
            let (u, _) = tube_feedback_input(
                &self.active.input_at(i),
                &self.active.gain,
                &ahead,
                &self.active.nominal_at(i),
                &p.input_box,
            );
            ahead = p.step_nominal(&ahead, &u, ctx.dt);
        }

        // Deviation of the realized state from that prediction over one
        // window: each step is Lipschitz in the state directly (l1) and
        // through the feedback correction (l2 |K|, clamping is
        // nonexpansive), and picks up one disturbance.
        let lambda_closed = 1.0 + ctx.dt * (self.l1 + self.l2 * gain_norm(&self.active.gain));
        let radius = deviation_bound(lambda_closed, m, p.eta1);

        // Re-linearize at the predicted state. The plan dynamics anchor at
        // the input the stored plan intends there; the gains anchor at the
        // uniform probe instead (see GAIN_PROBE).
        let anchor_input = self.active.input_at(t + m);
        let model = linearize(p, &ahead, &anchor_input, ctx.dt);
        let gain_model = linearize(p, &ahead, &InputVec::from_element(GAIN_PROBE), ctx.dt);
        let gains = synthesize(&gain_model.a, &gain_model.b, &ctx.weights)?;

        let lambda = growth_factor(&model.a, self.l1, ctx.dt);
        let settings = TubeSettings {
            eta_state: p.eta1,
            l_state: 0.0,
            handoff_radius: deviation_bound(lambda, m, p.eta1),
        };
        let profile = TubeProfile::build(
            lambda,
            p.eta1,
            ctx.horizon,
            &p.state_box,
            &p.input_box,
            &gains.k,
            &settings,
        )?;

        let ocp = LinearOcp::build(
            &model,
            ahead,
            &profile,
            &ctx.weights,
            gains.p,
            ctx.reference.window(t + m, ctx.horizon),
            &TerminalSpec {
                radius: self.epsilon,
                hard: ctx.hard_terminal,
            },
        )?;
        let shifted: Vec<InputVec> = (0..ctx.horizon)
            .map(|j| self.active.input_at(t + m + j))
            .collect();
        let warm = WarmStart {
            z: Some(ocp.warm_vector(&shifted, self.warm_slack)),
            y: self
                .warm_dual
                .clone()
                .filter(|y| y.len() == ocp.problem().num_constraints()),
        };
        let sol = ocp.solve(&self.solver, &warm)?;
        self.warm_slack = sol.slack;
        self.warm_dual = Some(sol.qp.y.clone());

        let nominal_states = nominal_rollout(p, self.ctx.dt, &ahead, &sol.inputs);
        let iterations = sol.qp.iterations;
        Ok((
            PendingPlan {
                buffer: PlanBuffer {
                    inputs: sol.inputs,
                    nominal_states,
                    anchor_time: t + m,
                    gain: gains.k,
                    decided_at: Some(t),
                },
                radius,
            },
            iterations,
        ))
    }
}

impl Controller for SmoothController {
    fn name(&self) -> &'static str {
        "smooth"
    }

    fn step(&mut self, t: usize, x: &StateVec) -> Result<StepOutput, ControllerError> {
        if t != self.expect_t {
            return Err(ControllerError::OutOfOrderStep {
                expected: self.expect_t,
                got: t,
            });
        }
        self.expect_t += 1;
        ArmParams::check_finite(x, &InputVec::zeros())?;
        let mut flags = 0u8;

        // (v) Swap in the plan whose compute window just closed. This runs
        // before anything reads the buffer so the prediction below sees the
        // same plan the feedback loop is about to follow.
        if self
            .pending
            .as_ref()
            .is_some_and(|p| p.buffer.anchor_time == t)
        {
            let p = self.pending.take().expect("checked above");
            self.handoffs.push(HandoffRecord {
                t_index: t,
                center: p.buffer.nominal_states[0],
                radius: p.radius,
                decided_at: p.buffer.decided_at,
            });
            self.active = p.buffer;
            flags |= EVENT_HANDOFF;
        }

        // (ii)-(iv) happen inside the trigger; their virtual-time cost is
        // the gap until the pending plan's anchor.
        if t % self.compute_steps == 0 {
            flags |= EVENT_SOLVE;
            let started = Instant::now();
            match self.plan_ahead(t, x) {
                Ok((pending, iterations)) => {
                    self.solves.push(SolveRecord {
                        t_index: t,
                        kind: SolveKind::Qp,
                        solved: true,
                        iterations,
                        solve_time_s: started.elapsed().as_secs_f64(),
                    });
                    self.pending = Some(pending);
                }
                Err(_) => {
                    // The stored plan keeps playing under feedback; its
                    // zero-input continuation holds the last nominal state,
                    // so there is always something to follow.
                    flags |= EVENT_FALLBACK;
                    self.solves.push(SolveRecord {
                        t_index: t,
                        kind: SolveKind::Qp,
                        solved: false,
                        iterations: 0,
                        solve_time_s: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }

        // (i) Emit the stored plan's input with tube feedback.
        let v = self.active.input_at(t);
        let center = self.active.nominal_at(t);
        let (input, saturated) =
            tube_feedback_input(&v, &self.active.gain, x, &center, &self.ctx.params.input_box);
        if saturated {
            flags |= EVENT_SATURATION;
        }
        Ok(StepOutput {
            input,
            nominal: center,
            flags,
        })
    }

    fn solves(&self) -> &[SolveRecord] {
        &self.solves
    }

    fn handoffs(&self) -> &[HandoffRecord] {
        &self.handoffs
    }
}

/// Conventional MPC with zero computation delay: one nonlinear solve from
/// the measured state at every substep.
pub struct IdealController {
    ctx: ControlContext,
    solver: AdmmSolver,
    profile: TubeProfile,
    p_terminal: StateMat,
    epsilon: f64,
    last_input: InputVec,
    warm: Option<Vec<InputVec>>,
    solves: Vec<SolveRecord>,
    expect_t: usize,
}

impl IdealController {
    pub fn new(ctx: ControlContext, x0: StateVec) -> Result<Self, ControllerError> {
        ctx.validate()?;
        ArmParams::check_finite(&x0, &InputVec::zeros())?;
        let basis = design_basis(&ctx, &x0, None)?;
        Ok(Self {
            solver: AdmmSolver::new(ctx.admm.clone()),
            profile: basis.profile,
            p_terminal: basis.gains.p,
            epsilon: basis.epsilon,
            ctx,
            last_input: InputVec::zeros(),
            warm: None,
            solves: Vec::new(),
            expect_t: 0,
        })
    }

    fn solve_from(
        &self,
        t: usize,
        x: &StateVec,
        shift: usize,
    ) -> Result<crate::solver::sqp::SqpResult, OcpError> {
        let ocp = NonlinearOcp::build(
            &self.ctx.params,
            self.ctx.dt,
            *x,
            &self.profile,
            &self.ctx.weights,
            self.ctx.reference.window(t, self.ctx.horizon),
            self.p_terminal,
            Some(TerminalSpec {
                radius: self.epsilon,
                hard: self.ctx.hard_terminal,
            }),
        )?;
        let warm = shifted_warm(self.warm.as_deref(), shift, self.ctx.horizon);
        ocp.solve(&self.solver, &self.ctx.sqp, warm.as_deref())
    }
}

impl Controller for IdealController {
    fn name(&self) -> &'static str {
        "ideal"
    }

    fn step(&mut self, t: usize, x: &StateVec) -> Result<StepOutput, ControllerError> {
        if t != self.expect_t {
            return Err(ControllerError::OutOfOrderStep {
                expected: self.expect_t,
                got: t,
            });
        }
        self.expect_t += 1;
        ArmParams::check_finite(x, &InputVec::zeros())?;
        let mut flags = EVENT_SOLVE;

        let started = Instant::now();
        let result = self.solve_from(t, x, 1);
        let solve_time_s = started.elapsed().as_secs_f64();
        let (accepted, iterations) = match &result {
            Ok(sol) => (sol.feasible, sol.qp_iterations),
            Err(_) => (false, 0),
        };
        self.solves.push(SolveRecord {
            t_index: t,
            kind: SolveKind::Sqp,
            solved: accepted,
            iterations,
            solve_time_s,
        });

        let input = if accepted {
            let sol = result.expect("accepted implies ok");
            let raw = sol.inputs[0];
            self.warm = Some(sol.inputs);
            let clamped = self.ctx.params.input_box.clamp(&raw);
            if clamped != raw {
                flags |= EVENT_SATURATION;
            }
            clamped
        } else {
            // Infeasible or failed: hold the previous input and say so.
            flags |= EVENT_FALLBACK;
            self.last_input
        };
        self.last_input = input;
        Ok(StepOutput {
            input,
            nominal: *x,
            flags,
        })
    }

    fn solves(&self) -> &[SolveRecord] {
        &self.solves
    }

    fn handoffs(&self) -> &[HandoffRecord] {
        &[]
    }
}

/// Conventional MPC under a worst-case compute delay: the plan computed
/// from `x(t_k)` takes effect `compute_steps` later and then plays open
/// loop, so every applied input answers a stale measurement.
pub struct TriggeredController {
    ctx: ControlContext,
    solver: AdmmSolver,
    delay: DelayModel,
    profile: TubeProfile,
    p_terminal: StateMat,
    epsilon: f64,
    initial_state: StateVec,
    active: Option<PlanBuffer>,
    pending: Option<PlanBuffer>,
    warm: Option<Vec<InputVec>>,
    solves: Vec<SolveRecord>,
    expect_t: usize,
}

impl TriggeredController {
    pub fn new(ctx: ControlContext, x0: StateVec, delay: DelayModel) -> Result<Self, ControllerError> {
        ctx.validate()?;
        if delay.compute_steps > ctx.horizon {
            return Err(ControllerError::DelayExceedsHorizon {
                delay: delay.compute_steps,
                horizon: ctx.horizon,
            });
        }
        ArmParams::check_finite(&x0, &InputVec::zeros())?;
        let basis = design_basis(&ctx, &x0, None)?;
        Ok(Self {
            solver: AdmmSolver::new(ctx.admm.clone()),
            delay,
            profile: basis.profile,
            p_terminal: basis.gains.p,
            epsilon: basis.epsilon,
            ctx,
            initial_state: x0,
            active: None,
            pending: None,
            warm: None,
            solves: Vec::new(),
            expect_t: 0,
        })
    }
}

impl Controller for TriggeredController {
    fn name(&self) -> &'static str {
        "triggered"
    }

    fn step(&mut self, t: usize, x: &StateVec) -> Result<StepOutput, ControllerError> {
        if t != self.expect_t {
            return Err(ControllerError::OutOfOrderStep {
                expected: self.expect_t,
                got: t,
            });
        }
        self.expect_t += 1;
        ArmParams::check_finite(x, &InputVec::zeros())?;
        let mut flags = 0u8;

        // A finished plan takes over exactly when its delay elapses. Both
        // hold policies agree on this instant; see HoldPolicy.
        if self.pending.as_ref().is_some_and(|p| p.anchor_time == t) {
            self.active = self.pending.take();
            flags |= EVENT_HANDOFF;
        }

        if t % self.delay.period() == 0 {
            flags |= EVENT_SOLVE;
            let started = Instant::now();
            let result = (|| -> Result<crate::solver::sqp::SqpResult, OcpError> {
                let ocp = NonlinearOcp::build(
                    &self.ctx.params,
                    self.ctx.dt,
                    *x,
                    &self.profile,
                    &self.ctx.weights,
                    self.ctx.reference.window(t, self.ctx.horizon),
                    self.p_terminal,
                    Some(TerminalSpec {
                        radius: self.epsilon,
                        hard: self.ctx.hard_terminal,
                    }),
                )?;
                let warm = shifted_warm(self.warm.as_deref(), self.delay.period(), self.ctx.horizon);
                ocp.solve(&self.solver, &self.ctx.sqp, warm.as_deref())
            })();
            let solve_time_s = started.elapsed().as_secs_f64();
            let (accepted, iterations) = match &result {
                Ok(sol) => (sol.feasible, sol.qp_iterations),
                Err(_) => (false, 0),
            };
            self.solves.push(SolveRecord {
                t_index: t,
                kind: SolveKind::Sqp,
                solved: accepted,
                iterations,
                solve_time_s,
            });
            if accepted {
                let sol = result.expect("accepted implies ok");
                self.warm = Some(sol.inputs.clone());
                let pending = PlanBuffer {
                    nominal_states: sol.states,
                    inputs: sol.inputs,
                    anchor_time: t + self.delay.compute_steps,
                    // Open-loop application: no ancillary correction.
                    gain: GainMat::zeros(),
                    decided_at: Some(t),
                };
                if pending.anchor_time == t {
                    // Zero delay: the plan is ready within the same substep.
                    self.active = Some(pending);
                    flags |= EVENT_HANDOFF;
                } else {
                    self.pending = Some(pending);
                }
            } else {
                // Keep following the previous plan (shift-and-hold).
                flags |= EVENT_FALLBACK;
            }
        }

        let (input, nominal) = match &self.active {
            Some(plan) => {
                if !plan.covers(t, 1) {
                    flags |= EVENT_HOLD;
                }
                let raw = plan.input_at(t);
                let clamped = self.ctx.params.input_box.clamp(&raw);
                if clamped != raw {
                    flags |= EVENT_SATURATION;
                }
                (clamped, plan.nominal_at(t))
            }
            None => {
                // Bootstrap: nothing has been scheduled yet; hold still.
                flags |= EVENT_HOLD;
                (InputVec::zeros(), self.initial_state)
            }
        };
        Ok(StepOutput {
            input,
            nominal,
            flags,
        })
    }

    fn solves(&self) -> &[SolveRecord] {
        &self.solves
    }

    fn handoffs(&self) -> &[HandoffRecord] {
        &[]
    }
}
