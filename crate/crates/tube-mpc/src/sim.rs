//! Deterministic closed-loop simulation in virtual time.
//!
//! The engine advances a controller one substep at a time against the real
//! plant: measure, ask the controller for an input, kick the successor state
//! with a seeded bounded disturbance, repeat. Computation delay is the
//! controller's business and is counted in substeps, so a trace is a pure
//! function of (task, controller configuration, seed) — bit for bit.
//!
//! Traces export as CSV with a fixed 17-column schema; metrics as JSON with
//! fixed keys. Wall-clock solve times are kept out of both the trace and the
//! metrics (they go to a separate timing report) so reruns stay
//! byte-identical.

use crate::controllers::{Controller, ControllerError, HandoffRecord, SolveRecord};
use crate::gains::CostWeights;
use crate::idx;
use crate::ocp::{stage_cost, Reference};
use crate::plant::ArmParams;
use crate::{InputVec, StateVec, NX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{self, Write};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("task initial state violates the state box at coordinate {0}")]
    InitialStateOutsideBox(usize),
    #[error(
        "task initial state is kinematically inconsistent: |fk(theta) - (x, y)| = {0:.3e}"
    )]
    InconsistentInitialState(f64),
    #[error("bad task parameter: {0}")]
    BadTask(&'static str),
    #[error("plant state became non-finite at substep {t}")]
    NonFinite { t: usize },
    #[error("controller emitted an input outside the input box at substep {t}")]
    InputOutsideBox { t: usize },
    #[error("controller failed: {0}")]
    Controller(#[from] ControllerError),
}

/// The two benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    PositionReach,
    TrajectoryTrack,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PositionReach => "position_reach",
            TaskKind::TrajectoryTrack => "trajectory_track",
        }
    }
}

/// Geometry of the reference the end effector should follow.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskPath {
    /// Hold one target point.
    SetPoint { target: (f64, f64) },
    /// A circular arc swept from `start_angle` to `end_angle` around
    /// `center`, then a straight segment to `line_end`, traversed at
    /// constant `speed` (arc-length parameterized) and held at the end.
    ArcThenLine {
        center: (f64, f64),
        radius: f64,
        start_angle: f64,
        end_angle: f64,
        line_end: (f64, f64),
        /// Reference speed in workspace units per second.
        speed: f64,
    },
}

impl TaskPath {
    /// Point reached after traveling `s` units of arc length from the start.
    /// Negative `s` clamps to the start, overshoot holds the end.
    pub fn point_at_arc_length(&self, s: f64) -> (f64, f64) {
        match self {
            TaskPath::SetPoint { target } => *target,
            TaskPath::ArcThenLine {
                center,
                radius,
                start_angle,
                end_angle,
                line_end,
                ..
            } => {
                let s = s.max(0.0);
                let arc = radius * (end_angle - start_angle).abs();
                if s <= arc {
                    let dir = (end_angle - start_angle).signum();
                    let phi = start_angle + dir * (s / radius);
                    (center.0 + radius * phi.cos(), center.1 + radius * phi.sin())
                } else {
                    let ax = center.0 + radius * end_angle.cos();
                    let ay = center.1 + radius * end_angle.sin();
                    let (dx, dy) = (line_end.0 - ax, line_end.1 - ay);
                    let len = dx.hypot(dy);
                    if len == 0.0 {
                        return (ax, ay);
                    }
                    let d = (s - arc).min(len);
                    (ax + dx * d / len, ay + dy * d / len)
                }
            }
        }
    }
}

/// One benchmark scenario: where the arm starts, what it should track, and
/// for how many substeps.
#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub initial: StateVec,
    /// Run length in substeps.
    pub duration: usize,
    pub path: TaskPath,
}

impl Task {
    /// Reach and hold the point (2, 6) from the benchmark start pose.
    pub fn position_reach() -> Self {
        Self {
            kind: TaskKind::PositionReach,
            initial: ArmParams::benchmark_initial_state(),
            duration: 300,
            path: TaskPath::SetPoint { target: (2.0, 6.0) },
        }
    }

    /// Follow a quarter circle from the start pose's (0, 4) up to (2, 6),
    /// then a straight run to (4, 7), at 0.1 units per second.
    pub fn trajectory_track() -> Self {
        Self {
            kind: TaskKind::TrajectoryTrack,
            initial: ArmParams::benchmark_initial_state(),
            duration: 600,
            path: TaskPath::ArcThenLine {
                center: (2.0, 4.0),
                radius: 2.0,
                start_angle: PI,
                end_angle: FRAC_PI_2,
                line_end: (4.0, 7.0),
                speed: 0.1,
            },
        }
    }

    pub fn validate(&self, params: &ArmParams) -> Result<(), SimError> {
        if self.duration == 0 {
            return Err(SimError::BadTask("duration must be at least one substep"));
        }
        if !self.initial.iter().all(|v| v.is_finite()) {
            return Err(SimError::BadTask("initial state must be finite"));
        }
        for i in 0..NX {
            if self.initial[i] < params.state_box.lower[i]
                || self.initial[i] > params.state_box.upper[i]
            {
                return Err(SimError::InitialStateOutsideBox(i));
            }
        }
        // The position coordinates must agree with the joint angles.
        let (fx, fy) = params.end_effector([
            self.initial[idx::TH1],
            self.initial[idx::TH2],
            self.initial[idx::TH3],
        ]);
        let gap = (fx - self.initial[idx::X]).hypot(fy - self.initial[idx::Y]);
        if gap > 1e-9 {
            return Err(SimError::InconsistentInitialState(gap));
        }
        match &self.path {
            TaskPath::SetPoint { target } => {
                if !(target.0.is_finite() && target.1.is_finite()) {
                    return Err(SimError::BadTask("target must be finite"));
                }
            }
            TaskPath::ArcThenLine {
                center,
                radius,
                start_angle,
                end_angle,
                line_end,
                speed,
            } => {
                if !(center.0.is_finite()
                    && center.1.is_finite()
                    && line_end.0.is_finite()
                    && line_end.1.is_finite()
                    && start_angle.is_finite()
                    && end_angle.is_finite())
                {
                    return Err(SimError::BadTask("path geometry must be finite"));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(SimError::BadTask("arc radius must be positive"));
                }
                if !(speed.is_finite() && *speed > 0.0) {
                    return Err(SimError::BadTask("reference speed must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Tracking reference for the controllers: one state per substep of the
    /// task, positions from the reference path, angles free. Controllers
    /// window into this and hold the final state beyond the end.
    pub fn reference(&self, dt: f64) -> Reference {
        match &self.path {
            TaskPath::SetPoint { target } => {
                Reference::constant_position(target.0, target.1, 1)
            }
            TaskPath::ArcThenLine { .. } => {
                let points: Vec<(f64, f64)> = (0..=self.duration)
                    .map(|t| reference_path(self, t, dt))
                    .collect();
                Reference::position_path(&points)
            }
        }
    }
}

/// Reference position at a substep index.
pub fn reference_path(task: &Task, t: usize, dt: f64) -> (f64, f64) {
    match &task.path {
        TaskPath::SetPoint { target } => *target,
        p @ TaskPath::ArcThenLine { speed, .. } => {
            p.point_at_arc_length(speed * t as f64 * dt)
        }
    }
}

/// Simulation knobs that are not part of the controller.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Per-step disturbance 2-norm bound; `None` uses the plant's eta1.
    pub disturbance_bound: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            disturbance_bound: None,
        }
    }
}

/// Draw one disturbance: a uniformly random direction (normalized standard
/// normals) scaled by a uniform magnitude in `[0, bound]`. A zero bound
/// draws nothing from the generator.
pub fn sample_disturbance(rng: &mut ChaCha8Rng, bound: f64) -> StateVec {
    if bound == 0.0 {
        return StateVec::zeros();
    }
    let dir = StateVec::from_fn(|_, _| rng.sample(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return StateVec::zeros();
    }
    let magnitude: f64 = rng.random_range(0.0..=bound);
    dir * (magnitude / norm)
}

/// One substep of a finished run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRow {
    pub t_index: usize,
    pub time_s: f64,
    /// Measured state at this substep, before the input acts.
    pub state: StateVec,
    pub input: InputVec,
    /// The controller's nominal prediction for this substep.
    pub nominal: StateVec,
    /// 2-norm of the disturbance added on the transition out of this substep.
    pub disturbance_norm: f64,
    pub event_flags: u8,
}

/// Everything a closed-loop run produces.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub rows: Vec<SimRow>,
    /// State after the final substep.
    pub final_state: StateVec,
    pub solves: Vec<SolveRecord>,
    pub handoffs: Vec<HandoffRecord>,
    pub dt: f64,
    pub seed: u64,
    /// Wall-clock duration of the whole loop; reporting only.
    pub wall_time_s: f64,
}

/// Drive `controller` through `task` against the disturbed plant.
///
/// The trace is a pure function of the arguments: disturbances come from a
/// counter-based generator seeded with `seed`, and nothing wall-clock ever
/// feeds back into the loop.
pub fn run_closed_loop(
    controller: &mut dyn Controller,
    task: &Task,
    params: &ArmParams,
    dt: f64,
    seed: u64,
    config: &SimConfig,
) -> Result<SimTrace, SimError> {
    task.validate(params)?;
    let bound = config.disturbance_bound.unwrap_or(params.eta1);
    if !(bound.is_finite() && bound >= 0.0) {
        return Err(SimError::BadTask("disturbance bound must be nonnegative"));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(task.duration);
    let mut x = task.initial;
    for t in 0..task.duration {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFinite { t });
        }
        let out = controller.step(t, &x)?;
        if !params.input_box.contains(&out.input) {
            return Err(SimError::InputOutsideBox { t });
        }
        let w = sample_disturbance(&mut rng, bound);
        rows.push(SimRow {
            t_index: t,
            time_s: t as f64 * dt,
            state: x,
            input: out.input,
            nominal: out.nominal,
            disturbance_norm: w.norm(),
            event_flags: out.flags,
        });
        x = params.step_real(&x, &out.input, dt, &w);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(SimError::NonFinite { t: task.duration });
    }

    Ok(SimTrace {
        rows,
        final_state: x,
        solves: controller.solves().to_vec(),
        handoffs: controller.handoffs().to_vec(),
        dt,
        seed,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Column schema of the trace export, one row per substep.
pub const CSV_HEADER: &str = "t_index,time_s,x,y,theta1,theta2,theta3,\
omega1,omega2,omega3,nominal_x,nominal_y,nominal_theta1,nominal_theta2,\
nominal_theta3,disturbance_norm,event_flags";

/// Write the trace as CSV with the documented 17-column schema.
pub fn write_csv<W: Write>(trace: &SimTrace, out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &trace.rows {
        write!(out, "{},{}", r.t_index, r.time_s)?;
        for i in 0..NX {
            write!(out, ",{}", r.state[i])?;
        }
        for i in 0..3 {
            write!(out, ",{}", r.input[i])?;
        }
        for i in 0..NX {
            write!(out, ",{}", r.nominal[i])?;
        }
        writeln!(out, ",{},{}", r.disturbance_norm, r.event_flags)?;
    }
    Ok(())
}

/// Deterministic summary of one run. Wall-clock quantities are deliberately
/// excluded; see [`Timing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// End-effector distance to the reference at the final substep.
    pub final_position_error: f64,
    /// Root-mean-square end-effector tracking error over the whole run.
    pub rms_tracking_error: f64,
    /// Sum of stage costs over all applied (state, input) pairs.
    pub cumulative_cost: f64,
    /// Worst violation of the state or input box anywhere in the trace.
    pub max_constraint_violation: f64,
    /// Fraction of plan handoffs whose realized state stayed inside the
    /// certified ball; 1.0 when the controller recorded no handoffs.
    pub tube_containment_rate: f64,
    pub solve_count: usize,
    /// Solves whose result was accepted as a plan.
    pub solved_count: usize,
    /// Inner QP iterations per solve: the deterministic compute proxy.
    pub mean_iterations: f64,
    pub max_iterations: usize,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Wall-clock report for the timing table. Lives in its own file because it
/// changes run to run while the metrics must not.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub solve_count: usize,
    pub mean_solve_time_s: f64,
    pub max_solve_time_s: f64,
    pub total_wall_time_s: f64,
}

impl Timing {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }
}

fn position_error(state: &StateVec, reference: (f64, f64)) -> f64 {
    (state[idx::X] - reference.0).hypot(state[idx::Y] - reference.1)
}

/// Summarize a finished trace against its task.
pub fn compute_metrics(
    trace: &SimTrace,
    task: &Task,
    params: &ArmParams,
    weights: &CostWeights,
) -> Metrics {
    let dt = trace.dt;
    let final_reference = reference_path(task, task.duration, dt);
    let final_position_error = position_error(&trace.final_state, final_reference);

    // Tracking error over every measured state, endpoints included.
    let mut sq_sum = final_position_error * final_position_error;
    for r in &trace.rows {
        let e = position_error(&r.state, reference_path(task, r.t_index, dt));
        sq_sum += e * e;
    }
    let rms_tracking_error = (sq_sum / (trace.rows.len() + 1) as f64).sqrt();

    // Stage costs track the position columns only, like the controllers do.
    let mut cumulative_cost = 0.0;
    for r in &trace.rows {
        let (rx, ry) = reference_path(task, r.t_index, dt);
        let mut err = StateVec::zeros();
        err[idx::X] = r.state[idx::X] - rx;
        err[idx::Y] = r.state[idx::Y] - ry;
        cumulative_cost += stage_cost(&err, &r.input, weights);
    }

    let mut max_constraint_violation = params.state_box.violation(&trace.final_state);
    for r in &trace.rows {
        max_constraint_violation = max_constraint_violation
            .max(params.state_box.violation(&r.state))
            .max(params.input_box.violation(&r.input));
    }

    let state_at = |t: usize| -> StateVec {
        if t < trace.rows.len() {
            trace.rows[t].state
        } else {
            trace.final_state
        }
    };
    let contained = trace
        .handoffs
        .iter()
        .filter(|h| (state_at(h.t_index) - h.center).norm() <= h.radius + 1e-12)
        .count();
    let tube_containment_rate = if trace.handoffs.is_empty() {
        1.0
    } else {
        contained as f64 / trace.handoffs.len() as f64
    };

    let solve_count = trace.solves.len();
    let solved_count = trace.solves.iter().filter(|s| s.solved).count();
    let max_iterations = trace.solves.iter().map(|s| s.iterations).max().unwrap_or(0);
    let mean_iterations = if solve_count == 0 {
        0.0
    } else {
        trace.solves.iter().map(|s| s.iterations as f64).sum::<f64>() / solve_count as f64
    };

    Metrics {
        final_position_error,
        rms_tracking_error,
        cumulative_cost,
        max_constraint_violation,
        tube_containment_rate,
        solve_count,
        solved_count,
        mean_iterations,
        max_iterations,
    }
}

/// Wall-clock statistics of a finished trace.
pub fn compute_timing(trace: &SimTrace) -> Timing {
    let solve_count = trace.solves.len();
    let max_solve_time_s = trace
        .solves
        .iter()
        .map(|s| s.solve_time_s)
        .fold(0.0, f64::max);
    let mean_solve_time_s = if solve_count == 0 {
        0.0
    } else {
        trace.solves.iter().map(|s| s.solve_time_s).sum::<f64>() / solve_count as f64
    };
    Timing {
        solve_count,
        mean_solve_time_s,
        max_solve_time_s,
        total_wall_time_s: trace.wall_time_s,
    }
}
