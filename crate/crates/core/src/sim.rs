//! Closed-loop simulation.
//!
//! A [`Scenario`] is run step by step: the controller QP of the current
//! stack is assembled and solved, inside a switch window the outgoing and
//! incoming stacks are both solved and their inputs blended, the robot is
//! integrated one step and a [`TraceRecord`] is logged. Runs are
//! deterministic.

use serde::{Deserialize, Serialize};

use crate::linalg::{inf_norm, numerical_rank, pseudo_inverse, RankConvention};
use crate::manipulator::{LinkChain, Robot, RobotState, Selector};
use crate::priority::{
    assemble_dynamic_qp, assemble_stack_qp, solve_dynamic, solve_kinematic, torque_barrier, AssembledQp,
    StackSpec, SwitchSchedule, TorqueBound, Weights,
};
use crate::qp::{QpSolution, SolverConfig};
use crate::tasks::{auxiliary_cbf, EsbTask, TaskKind, DEFAULT_RANK_TOL};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Joint velocities are the input.
    Kinematic,
    /// Torques are the input; tasks use auxiliary barriers and the torque
    /// bound is an integral barrier.
    Dynamic,
    /// The kinematic controller's velocities are tracked by a PD torque loop
    /// on the dynamic model.
    DynamicWithVelocityTracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integrator {
    pub method: Method,
    pub dt: f64,
}

/// Stack in force for iterations below `until_iteration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub until_iteration: usize,
    pub stack: StackSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tracking {
    #[serde(default = "default_k_u")]
    pub k_u: f64,
    #[serde(default = "default_k_q")]
    pub k_q: f64,
}

fn default_k_u() -> f64 {
    100.0
}
fn default_k_q() -> f64 {
    36.0
}

impl Default for Tracking {
    fn default() -> Self {
        Self { k_u: 100.0, k_q: 36.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub robot: Robot,
    pub model: ModelKind,
    pub tasks: Vec<EsbTask>,
    pub timeline: Vec<Segment>,
    pub switch: SwitchSchedule,
    pub integrator: Integrator,
    pub q0: Vector,
    pub qdot0: Vector,
    pub tau0: Vector,
    pub weights: Weights,
    pub torque_bound: Option<TorqueBound>,
    pub tracking: Tracking,
    pub rank_tol: f64,
    pub rank_convention: RankConvention,
    pub solver: SolverConfig,
}

/// Iterations `[start, end)` during which the stack of segment `from` is
/// blended into the stack of segment `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchWindow {
    pub start: usize,
    pub end: usize,
    pub from: usize,
    pub to: usize,
}

impl Scenario {
    /// Kinematic scenario with defaults for everything but the essentials.
    pub fn kinematic(
        name: impl Into<String>,
        robot: Robot,
        tasks: Vec<EsbTask>,
        timeline: Vec<Segment>,
        q0: Vector,
        dt: f64,
    ) -> Self {
        let n = robot.dof();
        Self {
            name: name.into(),
            robot,
            model: ModelKind::Kinematic,
            tasks,
            timeline,
            switch: SwitchSchedule {
                duration_s: 0.0,
                profile: crate::priority::SwitchProfile::Linear,
            },
            integrator: Integrator {
                method: Method::Euler,
                dt,
            },
            q0,
            qdot0: Vector::zeros(n),
            tau0: Vector::zeros(n),
            weights: Weights::default(),
            torque_bound: None,
            tracking: Tracking::default(),
            rank_tol: DEFAULT_RANK_TOL,
            rank_convention: RankConvention::Absolute,
            solver: SolverConfig::default(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.timeline.last().map_or(0, |s| s.until_iteration)
    }

    pub fn window_len(&self) -> usize {
        (self.switch.duration_s / self.integrator.dt).round() as usize
    }

    pub fn switch_windows(&self) -> Vec<SwitchWindow> {
        let len = self.window_len();
        if len == 0 {
            return Vec::new();
        }
        (0..self.timeline.len().saturating_sub(1))
            .map(|i| {
                let start = self.timeline[i].until_iteration;
                SwitchWindow {
                    start,
                    end: start + len,
                    from: i,
                    to: i + 1,
                }
            })
            .collect()
    }

    pub fn segment_at(&self, k: usize) -> usize {
        self.timeline
            .iter()
            .position(|s| k < s.until_iteration)
            .unwrap_or(self.timeline.len().saturating_sub(1))
    }

    pub fn segment_start(&self, seg: usize) -> usize {
        if seg == 0 {
            0
        } else {
            self.timeline[seg - 1].until_iteration
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.robot.dof();
        let bad = |m: &str| Err(Error::Scenario(m.to_string()));
        if !(self.integrator.dt > 0.0 && self.integrator.dt.is_finite()) {
            return bad("integrator dt must be positive");
        }
        if self.timeline.is_empty() {
            return bad("timeline is empty");
        }
        let mut prev = 0;
        for (i, seg) in self.timeline.iter().enumerate() {
            if seg.until_iteration <= prev {
                return bad(&format!("timeline segment {i} does not extend past iteration {prev}"));
            }
            prev = seg.until_iteration;
            if seg.stack.ids().next().is_some() {
                seg.stack.validate(&self.tasks)?;
            }
        }
        if !(self.switch.duration_s >= 0.0 && self.switch.duration_s.is_finite()) {
            return bad("switch duration must be nonnegative");
        }
        let len = self.window_len();
        for w in self.switch_windows() {
            if w.end > self.timeline[w.to].until_iteration {
                return bad(&format!(
                    "switch window of {len} iterations overruns segment {}",
                    w.to
                ));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return bad(&format!("duplicate task id {}", t.id));
            }
            t.validate(&self.robot)?;
        }
        for (v, what) in [(&self.q0, "q0"), (&self.qdot0, "qdot0"), (&self.tau0, "tau0")] {
            if v.len() != n {
                return bad(&format!("{what} has {} entries, robot has {n} joints", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(&format!("{what} is not finite"));
            }
        }
        if self.model != ModelKind::Kinematic && self.robot.chain().is_none() {
            return bad("dynamic models need a revolute chain");
        }
        if self.model == ModelKind::Dynamic {
            let Some(b) = self.torque_bound else {
                return bad("dynamic model needs a torque bound");
            };
            if !(b.u_max > 0.0 && b.gamma_u > 0.0) {
                return bad("torque bound and its gain must be positive");
            }
            if torque_barrier(&self.tau0, b.u_max) < 0.0 {
                return Err(Error::TorqueOutOfBounds {
                    norm: self.tau0.norm(),
                    u_max: b.u_max,
                });
            }
        }
        Ok(())
    }
}

/// `q + u dt`; both methods agree because `u` is held over the step.
pub fn step_kinematic(q: &Vector, u: &Vector, dt: f64, method: Method) -> Vector {
    match method {
        Method::Euler => q + u * dt,
        Method::Rk4 => {
            // k1 = k2 = k3 = k4 = u
            q + (u + u * 2.0 + u * 2.0 + u) * (dt / 6.0)
        }
    }
}

/// One step of the rigid-body dynamics with `τ` held over the step.
pub fn step_dynamic(chain: &LinkChain, state: &RobotState, tau: &Vector, dt: f64, method: Method) -> Result<RobotState> {
    let f = |x: &Vector| -> Result<Vector> {
        let s = RobotState::from_stacked(x);
        let qdd = chain.forward_dynamics(&s, tau)?;
        let n = s.q.len();
        let mut out = Vector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&s.qdot);
        out.rows_mut(n, n).copy_from(&qdd);
        Ok(out)
    };
    let x = state.stacked();
    let next = match method {
        Method::Euler => &x + f(&x)? * dt,
        Method::Rk4 => {
            let k1 = f(&x)?;
            let k2 = f(&(&x + &k1 * (dt / 2.0)))?;
            let k3 = f(&(&x + &k2 * (dt / 2.0)))?;
            let k4 = f(&(&x + &k3 * dt))?;
            &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    };
    Ok(RobotState::from_stacked(&next))
}

/// `τ = k_u (u − q̇) + k_q (q_d − q)`.
pub fn velocity_tracking_torque(u_des: &Vector, q_d: &Vector, state: &RobotState, gains: &Tracking) -> Vector {
    (u_des - &state.qdot) * gains.k_u + (q_d - &state.q) * gains.k_q
}

/// Active-set quantities of a solved controller QP.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityDiagnostics {
    /// Selects the active relaxable tasks: one column per active task.
    pub sigma: Matrix,
    /// Selects all active task and priority rows.
    pub sigma0: Matrix,
    /// Nonzero rows of `K Σ`.
    pub k_bar: Matrix,
    /// `K̄ Σᵀ γ(h)`, plus `V̄ v` on the same rows for relaxed stacks.
    pub z: Vector,
    pub v_z: f64,
    pub convergence_set_residual: f64,
    /// Positions in `slack_tasks` of the active tasks.
    pub active_tasks: Vec<usize>,
}

pub fn active_set_diagnostics(qp: &AssembledQp, sol: &QpSolution) -> StabilityDiagnostics {
    let n_s = qp.slack_tasks.len();
    let active_row = |r: usize| sol.active_set.binary_search(&r).is_ok();
    let active_tasks: Vec<usize> = (0..n_s)
        .filter(|&c| {
            let pos = qp.stack_tasks.iter().position(|&i| i == qp.slack_tasks[c]).expect("slack task in stack");
            active_row(qp.task_rows[pos])
        })
        .collect();
    let n_a = active_tasks.len();
    let sigma = Matrix::from_fn(n_s, n_a, |r, c| if active_tasks[c] == r { 1.0 } else { 0.0 });

    let n_rows = qp.priority_row_offset + qp.k.nrows();
    let active0: Vec<usize> = (0..n_rows).filter(|&r| active_row(r)).collect();
    let sigma0 = Matrix::from_fn(n_rows, active0.len(), |r, c| if active0[c] == r { 1.0 } else { 0.0 });

    let ks = &qp.k * &sigma;
    let keep: Vec<usize> = (0..ks.nrows()).filter(|&r| ks.row(r).iter().any(|x| *x != 0.0)).collect();
    let k_bar = Matrix::from_fn(keep.len(), n_a, |r, c| ks[(keep[r], c)]);

    let gamma = slack_gamma(qp);
    let mut z = &k_bar * (sigma.transpose() * gamma);
    // relaxed stacks settle on K̄Σᵀγ(h) + V̄v = 0 rather than K̄Σᵀγ(h) = 0
    let layout = qp.problem.layout;
    if layout.n_v > 0 {
        for (r, &kr) in keep.iter().enumerate() {
            let coeff = qp.problem.a[(qp.priority_row_offset + kr, layout.v_offset() + kr)];
            z[r] += coeff * sol.z[layout.v_offset() + kr];
        }
    }
    let v_z = 0.5 * z.norm_squared();
    StabilityDiagnostics {
        sigma,
        sigma0,
        k_bar,
        convergence_set_residual: z.norm(),
        z,
        v_z,
        active_tasks,
    }
}

fn slack_positions(qp: &AssembledQp) -> Vec<usize> {
    qp.slack_tasks
        .iter()
        .map(|s| qp.stack_tasks.iter().position(|i| i == s).expect("slack task in stack"))
        .collect()
}

fn slack_gamma(qp: &AssembledQp) -> Vector {
    let pos = slack_positions(qp);
    Vector::from_iterator(pos.len(), pos.iter().map(|&p| qp.gamma_h[p]))
}

/// `∂h/∂q` rows of the relaxable stack tasks.
pub fn slack_gradients(qp: &AssembledQp) -> Matrix {
    let pos = slack_positions(qp);
    Matrix::from_fn(pos.len(), qp.grad.ncols(), |r, c| qp.grad[(pos[r], c)])
}

/// Numerical rank of `K̄ Σᵀ ∂h/∂q` and whether it falls below `|𝓘| − 1`,
/// with `|𝓘|` the number of active relaxable tasks.
pub fn rank_monitor(
    k_bar: &Matrix,
    sigma: &Matrix,
    grad_h: &Matrix,
    tol: f64,
    convention: RankConvention,
) -> (usize, bool) {
    let n_active = sigma.ncols();
    if n_active == 0 || k_bar.nrows() == 0 {
        return (0, false);
    }
    let m = k_bar * sigma.transpose() * grad_h;
    let rank = numerical_rank(&m, tol, convention);
    (rank, n_active >= 2 && rank + 1 < n_active)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub iteration: usize,
    /// Segment whose stack is being approached.
    pub segment: usize,
    /// Weight of the outgoing stack; zero outside switch windows.
    pub s: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Joint velocities (kinematic) or torque rates (dynamic).
    pub u: Vec<f64>,
    pub tau: Option<Vec<f64>>,
    /// One entry per scenario task.
    pub h: Vec<f64>,
    pub h_prime: Option<Vec<f64>>,
    /// Slack per scenario task; zero for tasks without a slack column.
    pub delta: Vec<f64>,
    /// Stack relaxation, zero-padded to the widest stack.
    pub v: Vec<f64>,
    pub v_gamma: f64,
    pub v_z: f64,
    pub z: Vec<f64>,
    pub active_set: Vec<String>,
    pub rank: usize,
    pub rank_drop: bool,
    /// `‖·‖∞` change of the applied input (velocity or torque) from the
    /// previous step.
    pub du_inf: f64,
    pub h_u: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub name: String,
    pub model: ModelKind,
    pub dof: usize,
    pub dt: f64,
    pub task_ids: Vec<String>,
    pub n_v: usize,
    pub windows: Vec<SwitchWindow>,
    pub segment_ends: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    /// The applied input per step: velocities or torques.
    pub fn applied_input(&self) -> Vec<Vector> {
        self.records
            .iter()
            .map(|r| Vector::from_vec(r.tau.clone().unwrap_or_else(|| r.u.clone())))
            .collect()
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.meta.task_ids.iter().position(|t| t == id)
    }
}

struct StackOutput {
    /// Velocity (kinematic) or next torque (dynamic).
    applied: Vector,
    delta: Vec<f64>,
    v: Vec<f64>,
    v_gamma: f64,
    diag: Option<StabilityDiagnostics>,
    rank: (usize, bool),
    active: Vec<String>,
}

fn max_priority_rows(sc: &Scenario) -> usize {
    sc.timeline
        .iter()
        .map(|seg| {
            let cols: Vec<String> = seg
                .stack
                .ids()
                .filter(|id| sc.tasks.iter().any(|t| t.id == *id && !t.safety_critical))
                .map(str::to_string)
                .collect();
            if cols.is_empty() {
                0
            } else {
                crate::priority::build_prioritization_matrix(&seg.stack, &cols).map_or(0, |p| p.k.nrows())
            }
        })
        .max()
        .unwrap_or(0)
}

fn solve_stack(
    sc: &Scenario,
    stack: &StackSpec,
    state: &RobotState,
    torque: &Vector,
    t: f64,
    n_v: usize,
) -> Result<StackOutput> {
    let n = sc.robot.dof();
    let m = sc.tasks.len();
    if stack.ids().next().is_none() {
        return Ok(StackOutput {
            applied: if sc.model == ModelKind::Dynamic { torque.clone() } else { Vector::zeros(n) },
            delta: vec![0.0; m],
            v: vec![0.0; n_v],
            v_gamma: 0.0,
            diag: None,
            rank: (0, false),
            active: Vec::new(),
        });
    }
    let (applied, out) = match sc.model {
        ModelKind::Dynamic => {
            let chain = sc.robot.chain().expect("validated");
            let bound = sc.torque_bound.expect("validated");
            let dt = sc.integrator.dt;
            let qp = assemble_dynamic_qp(&sc.tasks, chain, state, torque, t, dt, stack, &bound, &sc.weights)?;
            let out = solve_dynamic(qp, torque, dt, &bound, &sc.solver)?;
            (out.tau.clone().expect("dynamic output has torque"), out)
        }
        _ => {
            let qp = assemble_stack_qp(&sc.tasks, &sc.robot, &state.q, t, stack, &sc.weights)?;
            let out = solve_kinematic(qp, &sc.solver)?;
            (out.u.clone(), out)
        }
    };
    let mut delta = vec![0.0; m];
    for (c, &task) in out.qp.slack_tasks.iter().enumerate() {
        delta[task] = out.delta[c];
    }
    let mut v = vec![0.0; n_v];
    for (i, x) in out.v.iter().enumerate().take(n_v) {
        v[i] = *x;
    }
    let v_gamma = 0.5 * slack_gamma(&out.qp).norm_squared();
    let diag = active_set_diagnostics(&out.qp, &out.qp_solution);
    let rank = rank_monitor(
        &diag.k_bar,
        &diag.sigma,
        &slack_gradients(&out.qp),
        sc.rank_tol,
        sc.rank_convention,
    );
    let active = out.qp_solution.active_set.iter().map(|&r| out.qp.row_labels[r].clone()).collect();
    Ok(StackOutput {
        applied,
        delta,
        v,
        v_gamma,
        diag: Some(diag),
        rank,
        active,
    })
}

pub fn run_scenario(sc: &Scenario) -> Result<Trace> {
    sc.validate()?;
    let n = sc.robot.dof();
    let dt = sc.integrator.dt;
    let windows = sc.switch_windows();
    let n_v = max_priority_rows(sc);
    let meta = TraceMeta {
        name: sc.name.clone(),
        model: sc.model,
        dof: n,
        dt,
        task_ids: sc.tasks.iter().map(|t| t.id.clone()).collect(),
        n_v,
        windows: windows.clone(),
        segment_ends: sc.timeline.iter().map(|s| s.until_iteration).collect(),
    };
    let mut state = RobotState::new(
        sc.q0.clone(),
        if sc.model == ModelKind::Kinematic { Vector::zeros(n) } else { sc.qdot0.clone() },
    );
    let mut torque = sc.tau0.clone();
    let mut q_ref = sc.q0.clone();
    let mut prev_applied: Option<Vector> = None;
    let mut records = Vec::with_capacity(sc.iterations());

    for k in 0..sc.iterations() {
        let t = k as f64 * dt;
        let step = |e: Error| e.at_step(k);
        let seg = sc.segment_at(k);
        let window = windows.iter().find(|w| w.to == seg && k >= w.start && k < w.end);
        let target = solve_stack(sc, &sc.timeline[seg].stack, &state, &torque, t, n_v).map_err(step)?;
        let (applied, s) = match window {
            Some(w) => {
                let s = sc.switch.s((k - w.start) as f64 * dt);
                let old = solve_stack(sc, &sc.timeline[w.from].stack, &state, &torque, t, n_v).map_err(step)?;
                (&old.applied * s + &target.applied * (1.0 - s), s)
            }
            None => (target.applied.clone(), 0.0),
        };

        let mut h = Vec::with_capacity(sc.tasks.len());
        for task in &sc.tasks {
            h.push(task.h(&sc.robot, &state.q, t).map_err(step)?);
        }
        let (u, tau, h_prime, h_u) = match sc.model {
            ModelKind::Dynamic => {
                let robot = &sc.robot;
                let hp = sc
                    .tasks
                    .iter()
                    .map(|task| auxiliary_cbf(task, robot, &state, t).map(|a| a.h_prime))
                    .collect::<Result<Vec<_>>>()
                    .map_err(step)?;
                let bound = sc.torque_bound.expect("validated");
                let u = (&applied - &torque) / dt;
                (u, Some(applied.clone()), Some(hp), Some(torque_barrier(&applied, bound.u_max)))
            }
            ModelKind::DynamicWithVelocityTracking => {
                let tau = velocity_tracking_torque(&applied, &q_ref, &state, &sc.tracking);
                (applied.clone(), Some(tau), None, None)
            }
            ModelKind::Kinematic => (applied.clone(), None, None, None),
        };
        let channel = tau.clone().unwrap_or_else(|| u.clone());
        let du_inf = prev_applied.as_ref().map_or(0.0, |p| inf_norm(&(&channel - p)));
        let (v_z, z) = target.diag.as_ref().map_or((0.0, Vec::new()), |d| (d.v_z, d.z.iter().copied().collect()));
        records.push(TraceRecord {
            t,
            iteration: k,
            segment: seg,
            s,
            q: state.q.iter().copied().collect(),
            qdot: if sc.model == ModelKind::Kinematic {
                u.iter().copied().collect()
            } else {
                state.qdot.iter().copied().collect()
            },
            u: u.iter().copied().collect(),
            tau: tau.as_ref().map(|x| x.iter().copied().collect()),
            h,
            h_prime,
            delta: target.delta,
            v: target.v,
            v_gamma: target.v_gamma,
            v_z,
            z,
            active_set: target.active,
            rank: target.rank.0,
            rank_drop: target.rank.1,
            du_inf,
            h_u,
        });
        prev_applied = Some(channel);

        match sc.model {
            ModelKind::Kinematic => {
                state.q = step_kinematic(&state.q, &u, dt, sc.integrator.method);
            }
            ModelKind::Dynamic => {
                let chain = sc.robot.chain().expect("validated");
                state = step_dynamic(chain, &state, &applied, dt, sc.integrator.method).map_err(step)?;
                torque = applied;
            }
            ModelKind::DynamicWithVelocityTracking => {
                let chain = sc.robot.chain().expect("validated");
                let tau = tau.expect("tracking torque");
                state = step_dynamic(chain, &state, &tau, dt, sc.integrator.method).map_err(step)?;
                q_ref = step_kinematic(&q_ref, &u, dt, Method::Euler);
            }
        }
        if state.q.iter().chain(state.qdot.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Scenario("state diverged".into()).at_step(k));
        }
    }
    Ok(Trace { meta, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub max_jump: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Largest `‖c_k − c_{k−1}‖∞` over the channel.
pub fn continuity_checker(channel: &[Vector], threshold: f64) -> ContinuityReport {
    let max_jump = step_jumps(channel).into_iter().fold(0.0, f64::max);
    ContinuityReport {
        max_jump,
        threshold,
        passed: max_jump <= threshold,
    }
}

/// `‖c_k − c_{k−1}‖∞` for `k ≥ 1`.
pub fn step_jumps(channel: &[Vector]) -> Vec<f64> {
    channel.windows(2).map(|w| inf_norm(&(&w[1] - &w[0]))).collect()
}

/// Nearest-rank percentile, `p ∈ [0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Jumps of the applied input inside `window` (including the steps into and
/// out of it) against twice the 95th percentile of the jumps in the segment
/// that precedes it.
pub fn switch_continuity(trace: &Trace, window: &SwitchWindow) -> ContinuityReport {
    let input = trace.applied_input();
    let seg_start = if window.from == 0 { 0 } else { trace.meta.segment_ends[window.from - 1] };
    // the jump at index j is between steps j and j + 1
    let jumps = step_jumps(&input);
    let baseline_from = trace
        .meta
        .windows
        .iter()
        .find(|w| w.to == window.from)
        .map_or(seg_start, |w| w.end);
    let baseline = &jumps[baseline_from.min(jumps.len())..window.start.saturating_sub(1).min(jumps.len())];
    let threshold = 2.0 * percentile(baseline, 95.0);
    let inside = &jumps[window.start.saturating_sub(1).min(jumps.len())..window.end.min(jumps.len())];
    let max_jump = inside.iter().copied().fold(0.0, f64::max);
    ContinuityReport {
        max_jump,
        threshold,
        passed: max_jump <= threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Superposition,
    NullSpace,
}

/// SVD cutoff for the baseline pseudoinverses.
pub const BASELINE_PINV_CUTOFF: f64 = 1e-8;

/// Jacobian-based velocity controllers with identity gains:
/// `q̇ = −Σ J_i† σ_i` or the recursive null-space form
/// `q̇ = −Σ N_{i−1} J_i† σ_i` with `N_i = I − J̄_i† J̄_i` and `J̄_i` the
/// stacked Jacobians of tasks `1..=i`. `errors[i]` is the task error.
pub fn baseline_from_jacobians(jacobians: &[Matrix], errors: &[Vector], mode: BaselineMode) -> Result<Vector> {
    let n = jacobians.first().map_or(0, |j| j.ncols());
    if jacobians.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: jacobians.len(),
            actual: errors.len(),
            context: "baseline task errors",
        });
    }
    let mut qdot = Vector::zeros(n);
    let mut null = Matrix::identity(n, n);
    for (i, (j, e)) in jacobians.iter().zip(errors).enumerate() {
        if j.ncols() != n || j.nrows() != e.len() {
            return Err(Error::DimensionMismatch {
                expected: j.nrows(),
                actual: e.len(),
                context: "baseline task error",
            });
        }
        let jp = pseudo_inverse(j, BASELINE_PINV_CUTOFF);
        match mode {
            BaselineMode::Superposition => qdot -= jp * e,
            BaselineMode::NullSpace => {
                qdot -= &null * jp * e;
                let stacked = crate::linalg::vstack(&jacobians[..=i]);
                let sp = pseudo_inverse(&stacked, BASELINE_PINV_CUTOFF);
                null = Matrix::identity(n, n) - sp * stacked;
            }
        }
    }
    Ok(qdot)
}

/// Task Jacobian and error of a Jacobian-based reading of `task`.
pub fn task_jacobian_and_error(task: &EsbTask, robot: &Robot, q: &Vector, t: f64) -> Result<(Matrix, Vector)> {
    let sel = match &task.kind {
        TaskKind::GoalPoint { selector, .. } => *selector,
        TaskKind::Orientation { link, .. } | TaskKind::LookAtPoint { link, .. } => Selector::Orientation(*link),
        TaskKind::JointUpper { .. } | TaskKind::JointLower { .. } => {
            return Err(Error::InvalidTask(format!(
                "{} is a set-based limit with no Jacobian-based counterpart",
                task.id
            )))
        }
    };
    let j = robot.task_jacobian(q, sel)?;
    // quadratic tasks have ∂h/∂σ = −(σ − σ_d)ᵀ
    let e = -task.evaluate(robot, q, t)?.dh_dsigma;
    Ok((j, e))
}

pub fn jacobian_baseline_controllers(
    tasks: &[EsbTask],
    robot: &Robot,
    q: &Vector,
    t: f64,
    mode: BaselineMode,
) -> Result<Vector> {
    let (js, es): (Vec<_>, Vec<_>) = tasks
        .iter()
        .map(|task| task_jacobian_and_error(task, robot, q, t))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    if js.is_empty() {
        return Ok(Vector::zeros(robot.dof()));
    }
    baseline_from_jacobians(&js, &es, mode)
}

/// `P = J J̄` with `J` the stacked task Jacobians and
/// `J̄ = [J₁†, …, J_M†]`.
pub fn superposition_matrix(jacobians: &[Matrix]) -> Matrix {
    let j = crate::linalg::vstack(jacobians);
    let pinvs: Vec<Matrix> = jacobians.iter().map(|ji| pseudo_inverse(ji, BASELINE_PINV_CUTOFF)).collect();
    let cols: usize = pinvs.iter().map(|p| p.ncols()).sum();
    let mut jbar = Matrix::zeros(j.ncols(), cols);
    let mut c = 0;
    for p in &pinvs {
        jbar.view_mut((0, c), (p.nrows(), p.ncols())).copy_from(p);
        c += p.ncols();
    }
    j * jbar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manipulator::CartesianRobot;
    use crate::priority::{StackMode, SwitchProfile};
    use crate::tasks::{goal_point_task, ClassK, Trajectory};
    use approx::assert_abs_diff_eq;

    fn chain3() -> Robot {
        Robot::Planar(LinkChain::planar(vec![0.5; 3]).unwrap())
    }

    fn goal(id: &str, sel: Selector, target: [f64; 2]) -> EsbTask {
        goal_point_task(id, sel, Trajectory::constant(target.to_vec()), ClassK::linear(1.0))
    }

    fn sim1_like(iters: usize) -> Scenario {
        let tasks = vec![
            goal("t1", Selector::LinkEnd(3), [0.5, 1.0]),
            goal("t2", Selector::LinkEnd(2), [0.5, 0.5]),
            goal("t3", Selector::LinkEnd(1), [0.0, 0.5]),
        ];
        Scenario::kinematic(
            "test",
            chain3(),
            tasks,
            vec![Segment {
                until_iteration: iters,
                stack: StackSpec::chain(&["t1", "t2", "t3"], 1e3, StackMode::Fixed),
            }],
            Vector::from_vec(vec![0.5, -0.5, 0.5]),
            0.01,
        )
    }

    #[test]
    fn kinematic_step_examples() {
        let q = Vector::from_vec(vec![0.1, -0.2]);
        let u = Vector::from_vec(vec![1.0, 2.0]);
        assert_eq!(step_kinematic(&q, &Vector::zeros(2), 0.1, Method::Euler), q);
        let e = step_kinematic(&q, &u, 0.1, Method::Euler);
        assert_abs_diff_eq!(e, Vector::from_vec(vec![0.2, 0.0]), epsilon = 1e-15);
        let r = step_kinematic(&q, &u, 0.1, Method::Rk4);
        assert_abs_diff_eq!(e, r, epsilon = 1e-15);
    }

    #[test]
    fn gravity_compensation_holds_state() {
        let chain = LinkChain::new(vec![0.5; 3], vec![1.0; 3], vec![0.1; 3], [0.0, -9.81]).unwrap();
        let s = RobotState::at_rest(Vector::from_vec(vec![0.3, -0.5, 0.9]));
        let g = chain.dynamics_terms(&s).unwrap().gravity;
        let mut x = s.clone();
        for _ in 0..100 {
            x = step_dynamic(&chain, &x, &g, 1e-3, Method::Rk4).unwrap();
        }
        assert!((&x.q - &s.q).amax() < 1e-12);
        assert!(x.qdot.amax() < 1e-12);
    }

    #[test]
    fn rk4_conserves_kinetic_energy() {
        let chain = LinkChain::new(vec![0.5; 3], vec![1.0, 0.8, 0.6], vec![0.0; 3], [0.0, 0.0]).unwrap();
        let mut s = RobotState::new(Vector::from_vec(vec![0.2, 0.7, -0.4]), Vector::from_vec(vec![1.0, -0.5, 0.8]));
        let e0 = chain.kinetic_energy(&s).unwrap();
        let tau = Vector::zeros(3);
        for _ in 0..1000 {
            s = step_dynamic(&chain, &s, &tau, 1e-3, Method::Rk4).unwrap();
        }
        assert!((chain.kinetic_energy(&s).unwrap() - e0).abs() < 1e-6);
    }

    #[test]
    fn rk4_error_shrinks_sixteenfold_on_pendulum() {
        // small oscillations: q(t) = q0 cos(ωt), ω² = 3g / (2L)
        let (l, g0, q0) = (0.5, 9.81, 1e-4);
        let chain = LinkChain::new(vec![l], vec![1.0], vec![0.0], [0.0, -g0]).unwrap();
        let omega = (3.0 * g0 / (2.0 * l)).sqrt();
        // hanging straight down is q = −π/2
        let rest = -std::f64::consts::FRAC_PI_2;
        let err = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let mut s = RobotState::at_rest(Vector::from_element(1, rest + q0));
            for _ in 0..steps {
                s = step_dynamic(&chain, &s, &Vector::zeros(1), dt, Method::Rk4).unwrap();
            }
            (s.q[0] - rest - q0 * (omega * steps as f64 * dt).cos()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn tracking_torque_examples() {
        let s = RobotState::new(Vector::from_vec(vec![0.1, 0.2]), Vector::from_vec(vec![0.5, -0.5]));
        let g = Tracking::default();
        assert_eq!(velocity_tracking_torque(&s.qdot, &s.q, &s, &g), Vector::zeros(2));
        let tau = velocity_tracking_torque(&s.qdot.add_scalar(1.0), &s.q, &s, &g);
        assert_abs_diff_eq!(tau, Vector::from_element(2, 100.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_task_scenario_stays_put() {
        let sc = Scenario::kinematic(
            "empty",
            chain3(),
            Vec::new(),
            vec![Segment {
                until_iteration: 20,
                stack: StackSpec {
                    order: Vec::new(),
                    kappa: 1e3,
                    mode: StackMode::Fixed,
                },
            }],
            Vector::from_vec(vec![0.1, 0.2, 0.3]),
            0.01,
        );
        let tr = run_scenario(&sc).unwrap();
        assert_eq!(tr.records.len(), 20);
        for r in &tr.records {
            assert!(r.u.iter().all(|x| *x == 0.0));
            assert_eq!(r.q, vec![0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let sc = sim1_like(200);
        let a = run_scenario(&sc).unwrap();
        let b = run_scenario(&sc).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn independent_tasks_converge() {
        let tr = run_scenario(&sim1_like(3000)).unwrap();
        let last = tr.records.last().unwrap();
        assert!(last.h.iter().all(|h| h.abs() < 1e-2), "{:?}", last.h);
    }

    #[test]
    fn diagnostics_when_all_or_nothing_is_active() {
        let robot = Robot::Cartesian(CartesianRobot { dof: 2 });
        let tasks = vec![goal("a", Selector::LinkEnd(1), [-1.0, 0.0]), goal("b", Selector::LinkEnd(1), [1.0, 0.0])];
        let stack = StackSpec::chain(&["a", "b"], 1e3, StackMode::Fixed);
        let q = Vector::from_vec(vec![0.2, 0.3]);
        let qp = assemble_stack_qp(&tasks, &robot, &q, 0.0, &stack, &Weights::default()).unwrap();
        let out = solve_kinematic(qp, &SolverConfig::default()).unwrap();
        let d = active_set_diagnostics(&out.qp, &out.qp_solution);
        assert_eq!(d.sigma.ncols(), 2);
        let expect = &out.qp.k * slack_gamma(&out.qp);
        assert_abs_diff_eq!(d.z, expect, epsilon = 1e-15);

        // strictly satisfied barriers: nothing active
        let slack_limit = |id: &str, joint: usize, bound: f64| EsbTask {
            id: id.into(),
            kind: TaskKind::JointUpper { joint, bound },
            gamma: ClassK::linear(1.0),
            gamma_prime: None,
            relative_degree: 1,
            safety_critical: false,
        };
        let tasks = vec![slack_limit("a", 1, 1.0), slack_limit("b", 2, 1.0)];
        let qp = assemble_stack_qp(&tasks, &robot, &Vector::zeros(2), 0.0, &stack, &Weights::default()).unwrap();
        let out = solve_kinematic(qp, &SolverConfig::default()).unwrap();
        let d = active_set_diagnostics(&out.qp, &out.qp_solution);
        assert!(d.z.is_empty());
        assert_eq!(d.v_z, 0.0);
    }

    #[test]
    fn full_rank_matrix_has_no_drop() {
        let k = Matrix::from_row_slice(1, 2, &[1.0, -1e-3]);
        let sigma = Matrix::identity(2, 2);
        let grad = Matrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 1.0]);
        assert_eq!(rank_monitor(&k, &sigma, &grad, 5e-3, RankConvention::Absolute), (1, false));
        let grad = Matrix::from_row_slice(2, 2, &[1e-3, 0.0, 0.0, 1e-3]);
        assert_eq!(rank_monitor(&k, &sigma, &grad, 5e-3, RankConvention::Absolute), (0, true));
    }

    #[test]
    fn continuity_examples() {
        let c = vec![Vector::from_element(2, 1.0); 5];
        assert_eq!(continuity_checker(&c, 0.0).max_jump, 0.0);
        let mut s = vec![Vector::zeros(2); 3];
        s.extend(vec![Vector::from_vec(vec![0.0, 2.5]); 3]);
        let r = continuity_checker(&s, 1.0);
        assert_eq!(r.max_jump, 2.5);
        assert!(!r.passed);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.0);
        assert_eq!(percentile(&(1..=100).map(f64::from).collect::<Vec<_>>(), 95.0), 95.0);
    }

    #[test]
    fn switch_window_blends_stacks() {
        let mut sc = sim1_like(400);
        sc.timeline = vec![
            Segment {
                until_iteration: 200,
                stack: StackSpec::chain(&["t1", "t2", "t3"], 1e3, StackMode::Auto),
            },
            Segment {
                until_iteration: 400,
                stack: StackSpec::chain(&["t3", "t2", "t1"], 1e3, StackMode::Auto),
            },
        ];
        sc.switch = SwitchSchedule {
            duration_s: 0.5,
            profile: SwitchProfile::Linear,
        };
        let w = sc.switch_windows();
        assert_eq!(w, vec![SwitchWindow { start: 200, end: 250, from: 0, to: 1 }]);
        let tr = run_scenario(&sc).unwrap();
        assert_eq!(tr.records[200].s, 1.0);
        assert_abs_diff_eq!(tr.records[225].s, 0.5, epsilon = 1e-12);
        assert_eq!(tr.records[250].s, 0.0);
    }

    #[test]
    fn baseline_examples() {
        let robot = chain3();
        let q = Vector::from_vec(vec![0.3, 0.2, -0.4]);
        let tip = robot.forward_kinematics(&q, Selector::LinkEnd(3)).unwrap();
        let t = goal("a", Selector::LinkEnd(3), [tip[0], tip[1]]);
        for mode in [BaselineMode::Superposition, BaselineMode::NullSpace] {
            let qd = jacobian_baseline_controllers(std::slice::from_ref(&t), &robot, &q, 0.0, mode).unwrap();
            assert!(qd.amax() < 1e-15);
        }
        // disjoint joint support: P = I
        let j1 = Matrix::from_row_slice(1, 3, &[2.0, 0.0, 0.0]);
        let j2 = Matrix::from_row_slice(2, 3, &[0.0, 1.0, 0.5, 0.0, -0.3, 1.0]);
        let p = superposition_matrix(&[j1.clone(), j2.clone()]);
        assert!((p - Matrix::identity(3, 3)).amax() < 1e-12);
        // the null-space controller leaves the first task untouched by the second
        let e = [Vector::from_element(1, 0.0), Vector::from_vec(vec![0.4, 0.1])];
        let j1b = Matrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let qd = baseline_from_jacobians(&[j1b.clone(), j2], &e, BaselineMode::NullSpace).unwrap();
        assert!((j1b * qd).amax() < 1e-12);
    }
}
