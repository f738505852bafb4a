//! Prioritized execution: slack-ordering matrices, controller QP assembly,
//! smooth stack switching, integral-barrier torque bounds and offline gain
//! selection.
//!
//! Decision variables are laid out as `z = [u; δ; v]`. Task rows read
//! `∂h/∂q u + δ_i ≥ −∂h/∂t − γ(h)`, so a positive `δ_i` is the amount by
//! which task `i` is relaxed. A stack `T_a ≺ T_b` adds `δ_a ≤ δ_b / κ`.
//! Safety-critical tasks get no slack column and never enter `K`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manipulator::{LinkChain, Robot, RobotState};
use crate::qp::{solve_qp, QpProblem, QpSolution, SolverConfig, VarLayout};
use crate::tasks::{auxiliary_cbf, EsbTask, TaskKind};
use crate::{Error, Matrix, Result, Vector};

pub const DEFAULT_KAPPA: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    Fixed,
    Auto,
}

/// Task-id groups, highest priority first; ids in a group share a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    pub order: Vec<Vec<String>>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_mode")]
    pub mode: StackMode,
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

fn default_mode() -> StackMode {
    StackMode::Fixed
}

impl StackSpec {
    /// One task per level.
    pub fn chain<S: AsRef<str>>(ids: &[S], kappa: f64, mode: StackMode) -> Self {
        Self {
            order: ids.iter().map(|s| vec![s.as_ref().to_string()]).collect(),
            kappa,
            mode,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().flatten().map(String::as_str)
    }

    pub fn validate(&self, tasks: &[EsbTask]) -> Result<()> {
        if self.order.iter().all(|g| g.is_empty()) {
            return Err(Error::InvalidStack("stack is empty".into()));
        }
        if !(self.kappa > 1.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidStack(format!("kappa must exceed 1, got {}", self.kappa)));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.ids() {
            if !seen.insert(id) {
                return Err(Error::InvalidStack(format!("task {id} listed twice")));
            }
            if !tasks.iter().any(|t| t.id == id) {
                return Err(Error::InvalidStack(format!("unknown task {id}")));
            }
        }
        Ok(())
    }
}

/// Rows of `K δ ≤ 0` over the slack columns `columns`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizationMatrix {
    pub k: Matrix,
    pub columns: Vec<String>,
    /// Priority level of the higher-priority task of each row.
    pub levels: Vec<usize>,
}

/// Emits `δ_a − δ_b/κ` for every pair of tasks in consecutive levels. Ids not
/// in `columns` (safety-critical tasks) are skipped.
pub fn build_prioritization_matrix(stack: &StackSpec, columns: &[String]) -> Result<PrioritizationMatrix> {
    if stack.order.iter().all(|g| g.is_empty()) {
        return Err(Error::InvalidStack("stack is empty".into()));
    }
    let col: HashMap<&str, usize> = columns.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let levels: Vec<Vec<usize>> = stack
        .order
        .iter()
        .map(|g| g.iter().filter_map(|id| col.get(id.as_str()).copied()).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    let mut rows = Vec::new();
    let mut row_levels = Vec::new();
    for (lvl, pair) in levels.windows(2).enumerate() {
        for &a in &pair[0] {
            for &b in &pair[1] {
                let mut r = vec![0.0; columns.len()];
                r[a] = 1.0;
                r[b] = -1.0 / stack.kappa;
                rows.push(r);
                row_levels.push(lvl);
            }
        }
    }
    let k = Matrix::from_fn(rows.len(), columns.len(), |r, c| rows[r][c]);
    Ok(PrioritizationMatrix {
        k,
        columns: columns.to_vec(),
        levels: row_levels,
    })
}

/// `diag(κ⁻¹, κ⁰, …, κ^{M−3})`.
pub fn build_v_matrix(m: usize, kappa: f64) -> Result<Matrix> {
    if m < 2 {
        return Err(Error::InvalidStack("stack relaxation needs at least two tasks".into()));
    }
    Ok(Matrix::from_diagonal(&Vector::from_fn(m - 1, |i, _| kappa.powi(i as i32 - 1))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    /// Slack weight `l` (also `l_δ`).
    #[serde(default = "default_weight")]
    pub l_delta: f64,
    #[serde(default = "default_weight")]
    pub l_v: f64,
}

fn default_weight() -> f64 {
    1e2
}

impl Default for Weights {
    fn default() -> Self {
        Self { l_delta: 1e2, l_v: 1e2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorqueBound {
    pub u_max: f64,
    #[serde(default = "default_gamma_u")]
    pub gamma_u: f64,
}

fn default_gamma_u() -> f64 {
    10.0
}

/// Controller QP together with the bookkeeping needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledQp {
    pub problem: QpProblem,
    pub mode: StackMode,
    /// Indices into the task list, in task-list order.
    pub stack_tasks: Vec<usize>,
    /// Constraint row of each stack task.
    pub task_rows: Vec<usize>,
    /// Stack tasks with a slack column, in column order.
    pub slack_tasks: Vec<usize>,
    pub k: Matrix,
    pub priority_row_offset: usize,
    pub torque_row: Option<usize>,
    /// Barrier value per stack task (`h′` for the dynamic model).
    pub h: Vec<f64>,
    /// `γ(h)` per stack task (`γ′(h′)` for the dynamic model).
    pub gamma_h: Vec<f64>,
    /// `∂h/∂q` per stack task, one row each.
    pub grad: Matrix,
    pub row_labels: Vec<String>,
}

struct TaskRow {
    task: usize,
    coeff_u: Vector,
    rhs: f64,
    h: f64,
    gamma_h: f64,
    grad: Vector,
}

fn stack_indices(tasks: &[EsbTask], stack: &StackSpec) -> Result<Vec<usize>> {
    stack.validate(tasks)?;
    let listed: std::collections::HashSet<&str> = stack.ids().collect();
    Ok((0..tasks.len()).filter(|&i| listed.contains(tasks[i].id.as_str())).collect())
}

fn build_qp(
    tasks: &[EsbTask],
    rows: Vec<TaskRow>,
    stack: &StackSpec,
    weights: &Weights,
    n_u: usize,
    cost_u: (Matrix, Vector),
    extra: Vec<(Vector, f64, String)>,
) -> Result<AssembledQp> {
    let slack_tasks: Vec<usize> = rows.iter().map(|r| r.task).filter(|&i| !tasks[i].safety_critical).collect();
    let columns: Vec<String> = slack_tasks.iter().map(|&i| tasks[i].id.clone()).collect();
    let pm = build_prioritization_matrix(stack, &columns)?;
    let n_d = slack_tasks.len();
    let n_k = pm.k.nrows();
    let n_v = if stack.mode == StackMode::Auto { n_k } else { 0 };
    let layout = VarLayout {
        n_u,
        n_delta: n_d,
        n_v,
    };
    let n = layout.len();
    if !(weights.l_delta > 0.0 && weights.l_v > 0.0) {
        return Err(Error::InvalidStack("slack weights must be positive".into()));
    }

    let mut h = Matrix::zeros(n, n);
    let mut c = Vector::zeros(n);
    h.view_mut((0, 0), (n_u, n_u)).copy_from(&cost_u.0);
    c.rows_mut(0, n_u).copy_from(&cost_u.1);
    for i in 0..n_d {
        h[(n_u + i, n_u + i)] = 2.0 * weights.l_delta;
    }
    for i in 0..n_v {
        h[(n_u + n_d + i, n_u + n_d + i)] = 2.0 * weights.l_v;
    }

    let p = rows.len() + n_k + extra.len();
    let mut a = Matrix::zeros(p, n);
    let mut b = Vector::zeros(p);
    let mut labels = Vec::with_capacity(p);
    let mut task_rows = Vec::with_capacity(rows.len());
    let mut grad = Matrix::zeros(rows.len(), n_u);
    for (r, row) in rows.iter().enumerate() {
        for j in 0..n_u {
            a[(r, j)] = row.coeff_u[j];
        }
        if let Some(col) = slack_tasks.iter().position(|&i| i == row.task) {
            a[(r, n_u + col)] = 1.0;
        }
        b[r] = row.rhs;
        labels.push(tasks[row.task].id.clone());
        task_rows.push(r);
        grad.set_row(r, &row.grad.transpose());
    }
    let off = rows.len();
    for kr in 0..n_k {
        for c in 0..n_d {
            a[(off + kr, n_u + c)] = -pm.k[(kr, c)];
        }
        if stack.mode == StackMode::Auto {
            let vm = build_v_matrix(n_k + 1, stack.kappa)?;
            a[(off + kr, n_u + n_d + kr)] = vm[(kr, kr)];
        }
        labels.push(format!("priority_{}", kr + 1));
    }
    let mut torque_row = None;
    for (e, (coeff, rhs, label)) in extra.into_iter().enumerate() {
        let r = off + n_k + e;
        for j in 0..n_u {
            a[(r, j)] = coeff[j];
        }
        b[r] = rhs;
        if label == "torque" {
            torque_row = Some(r);
        }
        labels.push(label);
    }
    Ok(AssembledQp {
        problem: QpProblem::with_layout(h, c, a, b, layout)?,
        mode: stack.mode,
        stack_tasks: rows.iter().map(|r| r.task).collect(),
        task_rows,
        slack_tasks,
        k: pm.k,
        priority_row_offset: off,
        torque_row,
        h: rows.iter().map(|r| r.h).collect(),
        gamma_h: rows.iter().map(|r| r.gamma_h).collect(),
        grad,
        row_labels: labels,
    })
}

fn kinematic_rows(tasks: &[EsbTask], idx: &[usize], robot: &Robot, q: &Vector, t: f64) -> Result<Vec<TaskRow>> {
    idx.iter()
        .map(|&i| {
            let ev = tasks[i].evaluate(robot, q, t)?;
            let gh = tasks[i].gamma.eval(ev.h);
            Ok(TaskRow {
                task: i,
                coeff_u: ev.dh_dq.clone(),
                rhs: -ev.dh_dt - gh,
                h: ev.h,
                gamma_h: gh,
                grad: ev.dh_dq,
            })
        })
        .collect()
}

/// Kinematic controller QP for `stack`; `mode` in the stack selects the
/// fixed or relaxed form.
pub fn assemble_stack_qp(
    tasks: &[EsbTask],
    robot: &Robot,
    q: &Vector,
    t: f64,
    stack: &StackSpec,
    weights: &Weights,
) -> Result<AssembledQp> {
    let idx = stack_indices(tasks, stack)?;
    let rows = kinematic_rows(tasks, &idx, robot, q, t)?;
    let n = robot.dof();
    build_qp(
        tasks,
        rows,
        stack,
        weights,
        n,
        (Matrix::identity(n, n) * 2.0, Vector::zeros(n)),
        Vec::new(),
    )
}

/// `min ‖u‖² + l‖δ‖²` with task rows and `Kδ ≤ 0`.
pub fn assemble_fixed_stack_qp(
    tasks: &[EsbTask],
    robot: &Robot,
    q: &Vector,
    t: f64,
    stack: &StackSpec,
    weights: &Weights,
) -> Result<AssembledQp> {
    let s = StackSpec {
        mode: StackMode::Fixed,
        ..stack.clone()
    };
    assemble_stack_qp(tasks, robot, q, t, &s, weights)
}

/// `min ‖u‖² + l_δ‖δ‖² + l_v‖v‖²` with task rows and `Kδ ≤ Vv`.
pub fn assemble_auto_stack_qp(
    tasks: &[EsbTask],
    robot: &Robot,
    q: &Vector,
    t: f64,
    stack: &StackSpec,
    weights: &Weights,
) -> Result<AssembledQp> {
    let s = StackSpec {
        mode: StackMode::Auto,
        ..stack.clone()
    };
    assemble_stack_qp(tasks, robot, q, t, &s, weights)
}

/// `h_u = u_max² − ‖u‖²`.
pub fn torque_barrier(u: &Vector, u_max: f64) -> f64 {
    u_max * u_max - u.norm_squared()
}

/// Torque-controlled QP over the torque increment `Δτ = dt · u′`, where
/// `u` is the torque currently applied. The cost is `‖u + Δτ‖² + l‖δ‖²
/// (+ l_v‖v‖²)`; task rows use the auxiliary barriers `h′`; the torque row
/// is the integral barrier `−2uᵀΔτ + dt γ_u(h_u) ≥ 0`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_dynamic_qp(
    tasks: &[EsbTask],
    chain: &LinkChain,
    state: &RobotState,
    torque: &Vector,
    t: f64,
    dt: f64,
    stack: &StackSpec,
    bound: &TorqueBound,
    weights: &Weights,
) -> Result<AssembledQp> {
    let n = chain.dof();
    let hu = torque_barrier(torque, bound.u_max);
    if hu < -1e-9 {
        return Err(Error::TorqueOutOfBounds {
            norm: torque.norm(),
            u_max: bound.u_max,
        });
    }
    let robot = Robot::Planar(chain.clone());
    let idx = stack_indices(tasks, stack)?;
    let terms = chain.dynamics_terms(state)?;
    let d_inv = terms
        .inertia
        .clone()
        .cholesky()
        .ok_or(Error::IllConditioned(f64::INFINITY))?
        .inverse();
    let qdd0 = &d_inv * (torque - terms.bias(&state.qdot));
    let rows = idx
        .iter()
        .map(|&i| {
            let aux = auxiliary_cbf(&tasks[i], &robot, state, t)?;
            let gp = aux.gamma_prime.eval(aux.h_prime);
            let coeff_u = d_inv.transpose() * &aux.dqdot;
            let drift = aux.dq.dot(&state.qdot) + aux.dqdot.dot(&qdd0) + aux.dt;
            let grad = tasks[i].evaluate(&robot, &state.q, t)?.dh_dq;
            Ok(TaskRow {
                task: i,
                coeff_u,
                rhs: -drift - gp,
                h: aux.h_prime,
                gamma_h: gp,
                grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_u = crate::tasks::ClassK::linear(bound.gamma_u);
    let torque_row = (-2.0 * torque, -dt * gamma_u.eval(hu.max(0.0)), "torque".to_string());
    build_qp(
        tasks,
        rows,
        stack,
        weights,
        n,
        (Matrix::identity(n, n) * 2.0, 2.0 * torque),
        vec![torque_row],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    /// Joint velocities (kinematic) or torque rates `u′` (dynamic).
    pub u: Vector,
    /// Torque to apply over the next step (dynamic model only).
    pub tau: Option<Vector>,
    pub delta: Vector,
    pub v: Vector,
    pub qp_solution: QpSolution,
    pub qp: AssembledQp,
}

fn unpack(qp: AssembledQp, sol: QpSolution) -> ControllerOutput {
    let l = qp.problem.layout;
    ControllerOutput {
        u: sol.z.rows(0, l.n_u).into_owned(),
        tau: None,
        delta: sol.z.rows(l.delta_offset(), l.n_delta).into_owned(),
        v: sol.z.rows(l.v_offset(), l.n_v).into_owned(),
        qp_solution: sol,
        qp,
    }
}

pub fn solve_kinematic(qp: AssembledQp, config: &SolverConfig) -> Result<ControllerOutput> {
    let sol = solve_qp(&qp.problem, config)?.require_optimal()?;
    Ok(unpack(qp, sol))
}

/// Solves a dynamic QP under the exact discrete-time torque barrier
/// `‖u + Δτ‖² ≤ ‖u‖² + dt γ_u(h_u)`.
///
/// When the unconstrained optimum leaves the ball, the ball multiplier `μ`
/// is found by bracketed regula falsi: the torque block of the cost is scaled
/// by `1 + μ`, which is the Lagrangian of the quadratically constrained
/// problem, and `‖u + Δτ(μ)‖` decreases monotonically in `μ`.
pub fn solve_dynamic(
    qp: AssembledQp,
    torque: &Vector,
    dt: f64,
    bound: &TorqueBound,
    config: &SolverConfig,
) -> Result<ControllerOutput> {
    let n = torque.len();
    let hu = torque_barrier(torque, bound.u_max).max(0.0);
    let radius = (torque.norm_squared() + dt * bound.gamma_u * hu).sqrt();
    let excess = |sol: &QpSolution| (torque + sol.z.rows(0, n)).norm() - radius;
    let scaled = |mu: f64| -> Result<QpSolution> {
        let mut p = qp.problem.clone();
        let f = 1.0 + mu;
        let block = p.h.view((0, 0), (n, n)) * f;
        p.h.view_mut((0, 0), (n, n)).copy_from(&block);
        let head = p.c.rows(0, n) * f;
        p.c.rows_mut(0, n).copy_from(&head);
        solve_qp(&p, config)?.require_optimal()
    };
    let mut sol = solve_qp(&qp.problem, config)?.require_optimal()?;
    let mut f_lo = excess(&sol);
    if f_lo > 0.0 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut hi_sol = scaled(hi)?;
        let mut f_hi = excess(&hi_sol);
        while f_hi > 0.0 {
            lo = hi;
            f_lo = f_hi;
            hi *= 10.0;
            if hi > 1e12 {
                return Err(Error::TorqueOutOfBounds {
                    norm: (torque + hi_sol.z.rows(0, n)).norm(),
                    u_max: bound.u_max,
                });
            }
            hi_sol = scaled(hi)?;
            f_hi = excess(&hi_sol);
        }
        // Illinois variant: halve the stale endpoint's value to avoid stalling
        let mut side = 0i8;
        let mut inside_by = f_hi;
        for _ in 0..60 {
            if inside_by > -1e-10 * radius.max(1.0) || hi - lo <= 1e-14 * hi {
                break;
            }
            let mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            let mid_sol = scaled(mid)?;
            let f_mid = excess(&mid_sol);
            if f_mid > 0.0 {
                lo = mid;
                f_lo = f_mid;
                if side == -1 {
                    f_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = mid;
                f_hi = f_mid;
                inside_by = f_mid;
                hi_sol = mid_sol;
                if side == 1 {
                    f_lo *= 0.5;
                }
                side = 1;
            }
        }
        sol = hi_sol;
    }
    let d_tau = sol.z.rows(0, n).into_owned();
    let mut tau = torque + &d_tau;
    let norm = tau.norm();
    if norm > radius {
        tau *= radius / norm;
    }
    let mut out = unpack(qp, sol);
    out.u = (&tau - torque) / dt;
    out.tau = Some(tau);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchProfile {
    Linear,
    Smoothstep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSchedule {
    pub duration_s: f64,
    #[serde(default = "default_profile")]
    pub profile: SwitchProfile,
}

fn default_profile() -> SwitchProfile {
    SwitchProfile::Linear
}

impl SwitchSchedule {
    /// Weight of the outgoing stack `t` seconds after the switch starts.
    pub fn s(&self, t: f64) -> f64 {
        if self.duration_s <= 0.0 {
            return if t < 0.0 { 1.0 } else { 0.0 };
        }
        let x = (t / self.duration_s).clamp(0.0, 1.0);
        match self.profile {
            SwitchProfile::Linear => 1.0 - x,
            SwitchProfile::Smoothstep => 1.0 - x * x * (3.0 - 2.0 * x),
        }
    }
}

/// `s(t) u₁ + (1 − s(t)) u₂`.
pub fn switching_controller(u1: &Vector, u2: &Vector, t: f64, schedule: &SwitchSchedule) -> Result<Vector> {
    if u1.len() != u2.len() {
        return Err(Error::DimensionMismatch {
            expected: u1.len(),
            actual: u2.len(),
            context: "switched inputs",
        });
    }
    let s = schedule.s(t);
    Ok(s * u1 + (1.0 - s) * u2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingVerdict {
    Preserved,
    Violated,
    /// The two stacks disagree on the order of `i` and `j`.
    NotApplicable,
}

/// Whether `δ_{1,i} < δ_{1,j}` and `δ_{2,i} < δ_{2,j}` imply
/// `Δ_i(s) < Δ_j(s)` for every `s ∈ [0, 1]`, where
/// `Δ(s) = s δ₁ + (1 − s) δ₂`. The gap is affine in `s`, so its sign on
/// the interval is decided by the endpoints.
pub fn delta_ordering_preserved(delta1: &Vector, delta2: &Vector, i: usize, j: usize) -> OrderingVerdict {
    let g1 = delta1[j] - delta1[i];
    let g2 = delta2[j] - delta2[i];
    if !(g1 > 0.0 && g2 > 0.0) {
        return OrderingVerdict::NotApplicable;
    }
    let gap = |s: f64| s * g1 + (1.0 - s) * g2;
    if gap(0.0) > 0.0 && gap(1.0) > 0.0 {
        OrderingVerdict::Preserved
    } else {
        OrderingVerdict::Violated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSampling {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Decades spanned by the grid below `cap`.
    #[serde(default = "default_decades")]
    pub decades: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    #[serde(default)]
    pub seed: u64,
    /// Above this many product-grid candidates every task shares one gain.
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
}

fn default_samples() -> usize {
    64
}
fn default_grid_points() -> usize {
    16
}
fn default_decades() -> f64 {
    3.0
}
fn default_cap() -> f64 {
    100.0
}
fn default_max_candidates() -> usize {
    4096
}

impl Default for GammaSampling {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            grid_points: default_grid_points(),
            decades: default_decades(),
            cap: default_cap(),
            seed: 0,
            max_candidates: default_max_candidates(),
        }
    }
}

impl GammaSampling {
    pub fn grid(&self) -> Vec<f64> {
        if self.grid_points <= 1 {
            return vec![self.cap];
        }
        let lo = self.cap.log10() - self.decades;
        (0..self.grid_points)
            .map(|k| 10f64.powf(lo + self.decades * k as f64 / (self.grid_points - 1) as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSelectionResult {
    pub gammas: Vec<(String, f64)>,
    /// Tasks whose gain is only limited by the cap.
    pub unbounded: Vec<String>,
    pub cap: f64,
    pub samples_used: usize,
    pub min_margin: f64,
    pub feasible: bool,
    pub note: Option<String>,
}

struct BoundarySeed {
    q: Vector,
    dir: Vector,
    task: usize,
}

/// Picks the largest `ΣΓ_i` on the grid for which, at sampled states on
/// every boundary `{h′_j = 0}` of the safe set, some torque with
/// `‖τ‖∞ ≤ u_max` keeps `ḣ′_i + Γ_i h′_i ≥ 0` for all safety-critical tasks.
/// Relaxable tasks can always be satisfied through their slack, so their
/// gains go to the cap.
pub fn select_gammas(
    tasks: &[EsbTask],
    chain: &LinkChain,
    u_max: f64,
    sampling: &GammaSampling,
) -> Result<GammaSelectionResult> {
    if tasks.iter().any(|t| !t.is_time_invariant()) {
        return Err(Error::InvalidTask("gain selection needs time-invariant tasks".into()));
    }
    if sampling.cap.is_nan() || sampling.cap <= 0.0 || sampling.grid_points == 0 {
        return Err(Error::InvalidTask("gain grid must be nonempty with a positive cap".into()));
    }
    let hard: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].safety_critical).collect();
    let unbounded: Vec<String> = tasks.iter().filter(|t| !t.safety_critical).map(|t| t.id.clone()).collect();
    let grid = sampling.grid();
    let n = chain.dof();

    if hard.is_empty() {
        return Ok(GammaSelectionResult {
            gammas: tasks.iter().map(|t| (t.id.clone(), sampling.cap)).collect(),
            unbounded,
            cap: sampling.cap,
            samples_used: 0,
            min_margin: f64::INFINITY,
            feasible: true,
            note: Some("unbounded: no safety-critical constraint limits the gains".into()),
        });
    }

    // joint box from the limit tasks, ±π elsewhere
    let mut lo = vec![-std::f64::consts::PI; n];
    let mut hi = vec![std::f64::consts::PI; n];
    for t in tasks {
        match t.kind {
            TaskKind::JointUpper { joint, bound } => hi[joint - 1] = bound,
            TaskKind::JointLower { joint, bound } => lo[joint - 1] = bound,
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let seeds: Vec<BoundarySeed> = (0..sampling.samples * hard.len())
        .map(|k| {
            let q = Vector::from_fn(n, |i, _| match rng.random_range(0..8) {
                0 => lo[i],
                1 => hi[i],
                _ => rng.random_range(lo[i]..=hi[i]),
            });
            let dir = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            BoundarySeed {
                q,
                dir,
                task: hard[k % hard.len()],
            }
        })
        .collect();

    let candidates: Vec<Vec<f64>> = if grid.len().saturating_pow(hard.len() as u32) <= sampling.max_candidates {
        let mut out = vec![vec![]];
        for _ in &hard {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    grid.iter().map(move |&g| {
                        let mut p = prefix.clone();
                        p.push(g);
                        p
                    })
                })
                .collect();
        }
        out
    } else {
        grid.iter().map(|&g| vec![g; hard.len()]).collect()
    };

    let robot = Robot::Planar(chain.clone());
    let mut best: Option<(f64, Vec<f64>, f64, usize)> = None;
    let mut smallest: Option<(f64, usize)> = None;
    for cand in &candidates {
        let mut local: Vec<EsbTask> = hard.iter().map(|&i| tasks[i].clone()).collect();
        for (t, &g) in local.iter_mut().zip(cand) {
            t.relative_degree = 2;
            t.gamma = crate::tasks::ClassK::linear(g);
            t.gamma_prime = Some(crate::tasks::ClassK::linear(g));
        }
        let (margin, used) = candidate_margin(&local, &hard, &robot, chain, &seeds, u_max)?;
        if cand.iter().all(|&g| g == grid[0]) {
            smallest = Some((margin, used));
        }
        if margin >= -1e-9 {
            let sum: f64 = cand.iter().sum();
            if best.as_ref().is_none_or(|(s, ..)| sum > *s) {
                best = Some((sum, cand.clone(), margin, used));
            }
        }
    }

    let assemble = |gains: &[f64]| -> Vec<(String, f64)> {
        tasks
            .iter()
            .enumerate()
            .map(|(i, t)| match hard.iter().position(|&h| h == i) {
                Some(k) => (t.id.clone(), gains[k]),
                None => (t.id.clone(), sampling.cap),
            })
            .collect()
    };
    Ok(match best {
        Some((_, gains, margin, used)) => GammaSelectionResult {
            gammas: assemble(&gains),
            note: (!unbounded.is_empty()).then(|| "unbounded: relaxable tasks set to the cap".to_string()),
            unbounded,
            cap: sampling.cap,
            samples_used: used,
            min_margin: margin,
            feasible: true,
        },
        None => {
            let (margin, used) = smallest.unwrap_or((f64::NEG_INFINITY, 0));
            GammaSelectionResult {
                gammas: assemble(&vec![grid[0]; hard.len()]),
                unbounded,
                cap: sampling.cap,
                samples_used: used,
                min_margin: margin,
                feasible: false,
                note: Some("no feasible gain on the grid; returning the smallest grid point".into()),
            }
        }
    })
}

/// Worst margin over the boundary samples for one candidate.
fn candidate_margin(
    local: &[EsbTask],
    hard: &[usize],
    robot: &Robot,
    chain: &LinkChain,
    seeds: &[BoundarySeed],
    u_max: f64,
) -> Result<(f64, usize)> {
    let n = chain.dof();
    let mut worst = f64::INFINITY;
    let mut used = 0;
    for seed in seeds {
        let j = hard.iter().position(|&h| h == seed.task).expect("seed task is hard");
        // h′_j = ∂h_j/∂q q̇ + Γ_j h_j is affine along q̇ = s · dir
        let ev = local[j].evaluate(robot, &seed.q, 0.0)?;
        let slope = ev.dh_dq.dot(&seed.dir);
        if slope.abs() < 1e-9 {
            continue;
        }
        let s = -local[j].gamma.eval(ev.h) / slope;
        let state = RobotState::new(seed.q.clone(), &seed.dir * s);
        let mut inside = true;
        let mut auxes = Vec::with_capacity(local.len());
        for t in local {
            let a = auxiliary_cbf(t, robot, &state, 0.0)?;
            if a.h < -1e-12 || a.h_prime < -1e-9 {
                inside = false;
                break;
            }
            auxes.push(a);
        }
        if !inside {
            continue;
        }
        used += 1;
        let terms = chain.dynamics_terms(&state)?;
        let d_inv = terms
            .inertia
            .clone()
            .cholesky()
            .ok_or(Error::IllConditioned(f64::INFINITY))?
            .inverse();
        let bias = terms.bias(&state.qdot);
        // maximize t s.t. ḣ′_i + Γ h′_i ≥ t, |τ_k| ≤ u_max; z = [τ; t]
        let m = auxes.len();
        let eps = 1e-8;
        let mut h = Matrix::identity(n + 1, n + 1) * (2.0 * eps);
        h[(n, n)] = 2.0 * eps;
        let mut c = Vector::zeros(n + 1);
        c[n] = -1.0;
        let mut a = Matrix::zeros(m + 2 * n, n + 1);
        let mut b = Vector::zeros(m + 2 * n);
        for (r, aux) in auxes.iter().enumerate() {
            let coeff = d_inv.transpose() * &aux.dqdot;
            for k in 0..n {
                a[(r, k)] = coeff[k];
            }
            a[(r, n)] = -1.0;
            let drift = aux.dq.dot(&state.qdot) - aux.dqdot.dot(&(&d_inv * &bias)) + aux.dt;
            b[r] = -drift - aux.gamma_prime.eval(aux.h_prime);
        }
        for k in 0..n {
            a[(m + 2 * k, k)] = 1.0;
            b[m + 2 * k] = -u_max;
            a[(m + 2 * k + 1, k)] = -1.0;
            b[m + 2 * k + 1] = -u_max;
        }
        let sol = solve_qp(&QpProblem::new(h, c, a, b)?, &SolverConfig::default())?.require_optimal()?;
        worst = worst.min(sol.z[n]);
    }
    Ok((worst, used))
}
