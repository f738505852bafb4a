//! End-to-end acceptance checks.
//!
//! Each criterion produces one [`CriterionResult`] carrying the measured
//! numbers next to their thresholds. A criterion that fails for a reason
//! analysed in the project notes carries a `known_deviation`; it still
//! counts as a failure in [`Report::all_passed`].

use std::f64::consts::PI;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::linalg::{inf_norm, mat_inf_norm};
use crate::manipulator::{CartesianRobot, LinkChain, Robot, Selector};
use crate::priority::{
    assemble_fixed_stack_qp, delta_ordering_preserved, solve_kinematic, OrderingVerdict, StackMode, StackSpec,
    Weights,
};
use crate::qp::{analytic_unprioritized_solution, SolverConfig};
use crate::scenario::{load_scenario, summarize, ScenarioFile, TraceSummary};
use crate::sim::{run_scenario, step_jumps, superposition_matrix, Scenario, Trace};
use crate::tasks::{
    goal_point_task, joint_limit_tasks, look_at_point_task, orientation_task, ClassK, EsbTask, Trajectory,
};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// The sample counts stated by each criterion.
    Fast,
    /// Five times as many random instances.
    Full,
}

impl Suite {
    fn scale(self) -> usize {
        match self {
            Suite::Fast => 1,
            Suite::Full => 5,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Suite::Fast),
            "full" => Ok(Suite::Full),
            other => Err(Error::Scenario(format!("unknown suite `{other}` (expected fast or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    /// Measured values against their thresholds.
    pub detail: String,
    pub known_deviation: Option<String>,
}

impl CriterionResult {
    fn new(id: u8, passed: bool, detail: String) -> Self {
        Self {
            id,
            name: NAMES[id as usize - 1].to_string(),
            passed,
            detail,
            known_deviation: None,
        }
    }

    fn deviation(mut self, note: impl Into<String>) -> Self {
        if !self.passed {
            self.known_deviation = Some(note.into());
        }
        self
    }

    /// Passed, or failed for a documented reason.
    pub fn accounted_for(&self) -> bool {
        self.passed || self.known_deviation.is_some()
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:>2} {}: {}", self.id, self.name, self.detail)?;
        if let Some(note) = &self.known_deviation {
            write!(f, " (known deviation: {note})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: Suite,
    pub seed: u64,
    pub results: Vec<CriterionResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

pub const CRITERIA: u8 = 12;

const NAMES: [&str; CRITERIA as usize] = [
    "independent-task convergence",
    "auto-stack tightening",
    "dependent-task prioritization",
    "priority switching",
    "task insertion/removal",
    "dynamic model with torque bounds",
    "rank-loss robustness",
    "KKT oracle equivalence",
    "superposition matrix properties",
    "gradient checks",
    "slack ordering under blending",
    "safety invariance",
];

/// Runs every criterion. The timed one runs alone; the rest share threads.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Report> {
    let first = run_criterion(1, suite, seed)?;
    let rest = std::thread::scope(|scope| {
        let handles: Vec<_> = (2..=CRITERIA)
            .map(|id| scope.spawn(move || run_criterion(id, suite, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Scenario("criterion panicked".into()))))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut results = vec![first];
    results.extend(rest);
    Ok(Report { suite, seed, results })
}

pub fn run_criterion(id: u8, suite: Suite, seed: u64) -> Result<CriterionResult> {
    let n = suite.scale();
    let rng = || ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(id as u64));
    match id {
        1 => independent_convergence(),
        2 => auto_tightening(),
        3 => dependent_prioritization(),
        4 => priority_switching(),
        5 => insertion_removal(),
        6 => torque_bounds(),
        7 => rank_loss(),
        8 => kkt_oracle(&mut rng(), 100 * n),
        9 => superposition_properties(&mut rng(), 50 * n),
        10 => gradient_checks(&mut rng(), 100 * n),
        11 => ordering_under_blending(&mut rng(), 1000 * n),
        12 => safety_invariance(&mut rng(), 20 * n),
        _ => Err(Error::Scenario(format!("no criterion {id}"))),
    }
}

struct Run {
    file: ScenarioFile,
    scenario: Scenario,
    trace: Trace,
    summary: TraceSummary,
    elapsed: Duration,
}

fn run_file(file: ScenarioFile) -> Result<Run> {
    let scenario = file.build()?;
    let start = Instant::now();
    let trace = run_scenario(&scenario)?;
    let elapsed = start.elapsed();
    let summary = summarize(&trace, &scenario.tasks);
    Ok(Run {
        file,
        scenario,
        trace,
        summary,
        elapsed,
    })
}

fn run_builtin(id: &str, overrides: &[&str]) -> Result<Run> {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    run_file(load_scenario(id, &overrides)?)
}

fn max_abs(named: &[(String, f64)]) -> f64 {
    named.iter().map(|(_, h)| h.abs()).fold(0.0, f64::max)
}

fn lookup(named: &[(String, f64)], id: &str) -> f64 {
    named.iter().find(|(n, _)| n == id).map_or(f64::NAN, |(_, h)| *h)
}

fn continuity_detail(summary: &TraceSummary) -> (bool, String) {
    let passed = !summary.continuity.is_empty() && summary.continuity.iter().all(|w| w.report.passed);
    let parts: Vec<String> = summary
        .continuity
        .iter()
        .map(|w| {
            format!(
                "[{}, {}): max jump {:.3e} vs {:.3e}",
                w.start, w.end, w.report.max_jump, w.report.threshold
            )
        })
        .collect();
    (passed, parts.join("; "))
}

fn independent_convergence() -> Result<CriterionResult> {
    let run = run_builtin("sim1_independent", &[])?;
    let h = max_abs(&run.summary.final_h);
    let dv = run.summary.max_v_gamma_increase;
    let secs = run.elapsed.as_secs_f64();
    let passed = run.summary.iterations <= 10_000 && h < 1e-2 && dv <= 1e-6 && secs < 10.0;
    Ok(CriterionResult::new(
        1,
        passed,
        format!(
            "max final |h| {h:.3e} (< 1e-2) after {} iterations; max V_gamma increase {dv:.3e} (<= 1e-6); runtime {secs:.2} s (< 10 s)",
            run.summary.iterations
        ),
    ))
}

fn auto_tightening() -> Result<CriterionResult> {
    let run = run_builtin("sim1_independent", &["timeline.0.stack.mode=auto"])?;
    let v = run.summary.final_v_norm2;
    let h = max_abs(&run.summary.final_h);
    Ok(CriterionResult::new(
        2,
        v < 1e-6 && h < 1e-2,
        format!("final ||v||^2 {v:.3e} (< 1e-6); max final |h| {h:.3e} (< 1e-2)"),
    ))
}

fn dependent_prioritization() -> Result<CriterionResult> {
    let run = run_builtin("sim2_dependent", &[])?;
    let h1 = lookup(&run.summary.final_h, "T1").abs();
    let tail = &run.trace.records[run.trace.records.len().saturating_sub(1000)..];
    let mut passed = h1 < 1e-2;
    let mut parts = vec![format!("|h1| {h1:.3e} (< 1e-2)")];
    for id in ["T2", "T3"] {
        let i = run.trace.task_index(id).ok_or_else(|| Error::Scenario(format!("no task {id}")))?;
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.h[i]), hi.max(r.h[i])));
        let h = lookup(&run.summary.final_h, id).abs();
        passed &= h > 0.05 && hi - lo < 1e-3;
        parts.push(format!("|h_{id}| {h:.4} (> 0.05), drift {:.3e} (< 1e-3)", hi - lo));
    }
    let v = run.summary.final_v_norm2;
    passed &= v > 1e-4;
    parts.push(format!("final ||v||^2 {v:.3e} (> 1e-4)"));
    Ok(CriterionResult::new(3, passed, parts.join("; ")))
}

fn priority_switching() -> Result<CriterionResult> {
    let run = run_builtin("sim3_switching", &[])?;
    let mut passed = true;
    let mut parts = Vec::new();
    for (k, seg) in run.file.timeline.iter().enumerate() {
        let top = &seg.stack.order[0][0];
        let h = run.summary.segment_end_h.get(k).map_or(f64::NAN, |e| lookup(e, top)).abs();
        passed &= h < 2e-2;
        parts.push(format!("segment {} top {top} |h| {h:.3e} (< 2e-2)", k + 1));
    }
    let (cont, detail) = continuity_detail(&run.summary);
    parts.push(detail);
    Ok(CriterionResult::new(4, passed && cont, parts.join("; ")))
}

fn insertion_removal() -> Result<CriterionResult> {
    let run = run_builtin("sim4_insert_remove", &[])?;
    let min_h = run.summary.min_safety_h.unwrap_or(f64::NAN);
    let (cont, detail) = continuity_detail(&run.summary);
    Ok(CriterionResult::new(
        5,
        min_h >= -1e-6 && cont,
        format!("min joint-limit h {min_h:.3e} (>= -1e-6); {detail}"),
    ))
}

fn torque_bounds() -> Result<CriterionResult> {
    let run = run_builtin("sim5_dynamic", &[])?;
    let tau = run.summary.max_torque_inf.unwrap_or(f64::INFINITY);
    let bound = run.scenario.torque_bound.map_or(60.0, |b| b.u_max);
    let at = |k: usize, id: &str| -> Result<(f64, f64)> {
        let i = run.trace.task_index(id).ok_or_else(|| Error::Scenario(format!("no task {id}")))?;
        let r = &run.trace.records[k];
        let hp = r.h_prime.as_ref().map_or(f64::NAN, |hp| hp[i]);
        Ok((r.h[i].abs(), hp.abs()))
    };
    let mid = run.trace.meta.segment_ends[0] - 1;
    let (h1, hp1) = at(mid, "T1")?;
    let (h2, hp2) = at(run.trace.records.len() - 1, "T2")?;
    let (cont, detail) = continuity_detail(&run.summary);
    let passed = tau <= bound + 1e-6 && h1 < 5e-2 && hp1 < 5e-2 && h2 < 5e-2 && hp2 < 5e-2 && cont;
    Ok(CriterionResult::new(
        6,
        passed,
        format!(
            "max |tau| {tau:.4} (<= {bound} + 1e-6); mid-run |h1| {h1:.3e}, |h1'| {hp1:.3e}; end |h2| {h2:.3e}, |h2'| {hp2:.3e} (all < 5e-2); {detail}"
        ),
    ))
}

fn median(values: &[f64]) -> f64 {
    crate::sim::percentile(values, 50.0)
}

fn rank_loss() -> Result<CriterionResult> {
    let run = run_builtin("ex5_rank_loss", &[])?;
    let expected = [-1.0004, 0.0];
    let near: Vec<usize> = run
        .trace
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.rank_drop && (r.q[0] - expected[0]).hypot(r.q[1] - expected[1]) < 0.05)
        .map(|(k, _)| k)
        .collect();
    let flagged = run.summary.rank_drop_iterations.len();
    let u: Vec<Vector> = run.trace.records.iter().map(|r| Vector::from_vec(r.u.clone())).collect();
    let h: Vec<Vector> = run.trace.records.iter().map(|r| Vector::from_vec(r.h.clone())).collect();
    // jump into step k sits at index k − 1
    let du = step_jumps(&u);
    let dh = step_jumps(&h);
    let (mu, mh) = (median(&du), median(&dh));
    // jumps into and out of a step
    let around = |jumps: &[f64], k: usize| {
        let into = if k > 0 { jumps[k - 1] } else { 0.0 };
        into.max(jumps.get(k).copied().unwrap_or(0.0))
    };
    let onset = near.first().copied();
    let (ou, oh) = onset.map_or((f64::NAN, f64::NAN), |k| (around(&du, k), around(&dh, k)));
    let run_max = |jumps: &[f64]| near.iter().map(|&k| around(jumps, k)).fold(0.0, f64::max);
    let at = onset.map_or("none".to_string(), |k| {
        let q = &run.trace.records[k].q;
        format!("iteration {k} at x = [{:.5}, {:.5}]", q[0], q[1])
    });
    let passed = onset.is_some() && ou <= 10.0 * mu && oh <= 10.0 * mh;
    let result = CriterionResult::new(
        7,
        passed,
        format!(
            "{flagged} flagged steps, {} within 0.05 of [-1.0004, 0], onset {at}; u jump there {ou:.3e} vs 10x median {:.3e}; \
             h jump {oh:.3e} vs 10x median {:.3e}; largest jumps while flagged: u {:.3e}, h {:.3e}",
            near.len(),
            10.0 * mu,
            10.0 * mh,
            run_max(&du),
            run_max(&dh)
        ),
    );
    Ok(if onset.is_some() && oh <= 10.0 * mh {
        result.deviation(
            "u stays continuous at the onset but bends: the priority row activates there and u then falls at about \
             490 per second, so its per-step change shrinks linearly with dt while remaining near 80x the trace median",
        )
    } else {
        result
    })
}

fn random_chain(rng: &mut ChaCha8Rng, n: usize) -> Result<LinkChain> {
    LinkChain::planar((0..n).map(|_| rng.random_range(0.3..1.0)).collect())
}

fn random_q(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-PI..PI))
}

fn kkt_oracle(rng: &mut ChaCha8Rng, count: usize) -> Result<CriterionResult> {
    let mut compared = 0;
    let mut attempts = 0;
    let mut worst: f64 = 0.0;
    while compared < count && attempts < 200 * count {
        attempts += 1;
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=4);
        let chain = random_chain(rng, n)?;
        let reach: f64 = chain.link_lengths.iter().sum();
        let robot = Robot::Planar(chain);
        let tasks: Vec<EsbTask> = (0..m)
            .map(|i| {
                let r = rng.random_range(0.0..reach);
                let a = rng.random_range(-PI..PI);
                goal_point_task(
                    format!("t{i}"),
                    Selector::LinkEnd(rng.random_range(1..=n)),
                    Trajectory::constant(vec![r * a.cos(), r * a.sin()]),
                    ClassK::linear(rng.random_range(0.5..5.0)),
                )
            })
            .collect();
        let stack = StackSpec {
            order: vec![tasks.iter().map(|t| t.id.clone()).collect()],
            kappa: 1e3,
            mode: StackMode::Fixed,
        };
        let weights = Weights {
            l_delta: 10f64.powf(rng.random_range(0.0..3.0)),
            ..Weights::default()
        };
        let q = random_q(rng, n);
        let qp = assemble_fixed_stack_qp(&tasks, &robot, &q, 0.0, &stack, &weights)?;
        let grad = qp.grad.clone();
        let gamma = Vector::from_vec(qp.gamma_h.clone());
        let out = solve_kinematic(qp, &SolverConfig::default())?;
        let (qdot, delta) = analytic_unprioritized_solution(&grad, &gamma, weights.l_delta)?;
        // the closed form holds only when every task row is active
        if delta.iter().any(|&d| d > 0.0) {
            continue;
        }
        worst = worst.max(inf_norm(&(&out.u - &qdot)));
        compared += 1;
    }
    Ok(CriterionResult::new(
        8,
        compared == count && worst < 1e-6,
        format!("{compared}/{count} instances with every row active; max ||qdot_QP - qdot_oracle||_inf {worst:.3e} (< 1e-6)"),
    ))
}

fn random_orthonormal_rows(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q().transpose()
}

fn superposition_properties(rng: &mut ChaCha8Rng, count: usize) -> Result<CriterionResult> {
    let (mut sym, mut min_eig, mut max_imag) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..count {
        let n = rng.random_range(2..=6);
        let robot = Robot::Planar(random_chain(rng, n)?);
        let q = random_q(rng, n);
        let m = rng.random_range(1..=3);
        let jacobians = (0..m)
            .map(|_| robot.task_jacobian(&q, Selector::LinkEnd(rng.random_range(1..=n))))
            .collect::<Result<Vec<_>>>()?;
        let p = superposition_matrix(&jacobians);
        sym = sym.max((&p - p.transpose()).amax());
        for ev in p.complex_eigenvalues().iter() {
            min_eig = min_eig.min(ev.re);
            max_imag = max_imag.max(ev.im.abs());
        }
    }
    let mut orth: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(1..=6);
        let rows = random_orthonormal_rows(rng, n);
        let mut blocks = Vec::new();
        let mut r = 0;
        while r < n {
            let len = rng.random_range(1..=n - r);
            blocks.push(rows.rows(r, len).into_owned());
            r += len;
        }
        let p = superposition_matrix(&blocks);
        orth = orth.max(mat_inf_norm(&(p - Matrix::identity(n, n))));
    }
    let spectrum_ok = min_eig >= -1e-9;
    let result = CriterionResult::new(
        9,
        sym < 1e-9 && spectrum_ok && orth < 1e-9,
        format!(
            "max |P - P^T| {sym:.3e} (< 1e-9); min eigenvalue {min_eig:.3e} (>= -1e-9, max imaginary part {max_imag:.1e}); orthogonal ||P - I||_inf {orth:.3e} (< 1e-9)"
        ),
    );
    Ok(if spectrum_ok && orth < 1e-9 {
        result.deviation(
            "P = J J^T blockdiag((J_i J_i^T)^-1) is similar to a PSD matrix, so its spectrum is real and nonnegative, \
             but it is not symmetric unless the task Jacobians are orthogonal",
        )
    } else {
        result
    })
}

fn fd_gradient(task: &EsbTask, robot: &Robot, q: &Vector) -> Result<Vector> {
    let eps = 1e-6;
    let mut g = Vector::zeros(q.len());
    for i in 0..q.len() {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[i] += eps;
        qm[i] -= eps;
        g[i] = (task.h(robot, &qp, 0.0)? - task.h(robot, &qm, 0.0)?) / (2.0 * eps);
    }
    Ok(g)
}

/// `‖g − g_fd‖∞ / max(‖g_fd‖∞, 1e−3)` for a claimed gradient `g` of the
/// task barrier at `q`; the floor keeps near-stationary points meaningful.
pub fn gradient_relative_error(task: &EsbTask, robot: &Robot, q: &Vector, analytic: &Vector) -> Result<f64> {
    let fd = fd_gradient(task, robot, q)?;
    Ok(inf_norm(&(analytic - &fd)) / inf_norm(&fd).max(1e-3))
}

fn gradient_tasks(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<EsbTask>> {
    let g = ClassK::default();
    let mut pt = || vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
    let (a, b, c, d) = (pt(), pt(), pt(), pt());
    let k = rng.random_range(1..=n);
    let mut tasks = vec![
        goal_point_task("end", Selector::LinkEnd(k), Trajectory::constant(a), g),
        goal_point_task("base", Selector::LinkBase(k), Trajectory::constant(b), g),
        goal_point_task("angle", Selector::Orientation(k), Trajectory::constant(vec![c[0]]), g),
        goal_point_task("joint", Selector::Joint(k), Trajectory::constant(vec![c[1]]), g),
        orientation_task("orientation", k, rng.random_range(-PI..PI), g),
        look_at_point_task("look_at", k, [d[0] * 3.0, d[1] * 3.0], g),
    ];
    let hi: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
    let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..-0.5)).collect();
    tasks.extend(joint_limit_tasks("limits", &hi, &lo, g)?);
    Ok(tasks)
}

fn gradient_checks(rng: &mut ChaCha8Rng, count: usize) -> Result<CriterionResult> {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for _ in 0..count {
        let n = rng.random_range(1..=5);
        let robot = Robot::Planar(random_chain(rng, n)?);
        let q = random_q(rng, n);
        let mut cases: Vec<(Robot, EsbTask, Vector)> = gradient_tasks(rng, n)?
            .into_iter()
            .map(|t| (robot.clone(), t, q.clone()))
            .collect();
        let dof = rng.random_range(1..=3);
        let target: Vec<f64> = (0..dof).map(|_| rng.random_range(-2.0..2.0)).collect();
        cases.push((
            Robot::Cartesian(CartesianRobot { dof }),
            goal_point_task("point", Selector::LinkEnd(1), Trajectory::constant(target), ClassK::default()),
            Vector::from_fn(dof, |_, _| rng.random_range(-2.0..2.0)),
        ));
        for (robot, task, q) in &cases {
            let analytic = task.evaluate(robot, q, 0.0)?.dh_dq;
            let rel = gradient_relative_error(task, robot, q, &analytic)?;
            if rel > worst.0 {
                worst = (rel, task.id.clone());
            }
            checked += 1;
        }
    }
    Ok(CriterionResult::new(
        10,
        worst.0 < 1e-5,
        format!(
            "{checked} gradients over {count} configurations; max relative error {:.3e} (< 1e-5){}",
            worst.0,
            if worst.1.is_empty() { String::new() } else { format!(" for {}", worst.1) }
        ),
    ))
}

fn ordering_under_blending(rng: &mut ChaCha8Rng, count: usize) -> Result<CriterionResult> {
    let grid: Vec<f64> = (0..1000).map(|k| k as f64 / 999.0).collect();
    let mut verdict_failures = 0;
    let mut grid_violations = 0;
    let mut pairs = 0;
    while pairs < count {
        let m = rng.random_range(2..=6);
        let mut d1 = Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let mut d2 = Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let i = rng.random_range(0..m);
        let j = (i + rng.random_range(1..m)) % m;
        for d in [&mut d1, &mut d2] {
            if d[i] > d[j] {
                d.swap_rows(i, j);
            }
        }
        if !(d1[i] < d1[j] && d2[i] < d2[j]) {
            continue;
        }
        pairs += 1;
        if delta_ordering_preserved(&d1, &d2, i, j) != OrderingVerdict::Preserved {
            verdict_failures += 1;
        }
        grid_violations += grid
            .iter()
            .filter(|&&s| s * d1[i] + (1.0 - s) * d2[i] >= s * d1[j] + (1.0 - s) * d2[j])
            .count();
    }
    Ok(CriterionResult::new(
        11,
        verdict_failures == 0 && grid_violations == 0,
        format!(
            "{pairs} pairs on a {}-point grid; {verdict_failures} verdicts not preserved, {grid_violations} grid violations (0 allowed)",
            grid.len()
        ),
    ))
}

/// Joint limits on a random three-link arm, with goals chosen from a
/// configuration that violates them.
fn adversarial_limits_file(rng: &mut ChaCha8Rng, k: usize) -> Result<ScenarioFile> {
    let n = 3;
    let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..-0.3)).collect();
    let q0: Vec<f64> = (0..n).map(|i| rng.random_range(0.8 * lower[i]..0.8 * upper[i])).collect();
    let outside: Vec<f64> = (0..n)
        .map(|i| {
            let excess = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                upper[i] + excess
            } else {
                lower[i] - excess
            }
        })
        .collect();
    let chain = LinkChain::planar(vec![0.5; n])?;
    let target = chain.forward_kinematics(&Vector::from_vec(outside.clone()), Selector::LinkEnd(n))?;
    let theta: f64 = outside.iter().sum();
    let mode = if rng.random_bool(0.5) { "auto" } else { "fixed" };
    let gain = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| json!({ "kind": "linear", "gain": rng.random_range(lo..hi) });
    let doc = json!({
        "name": format!("limits_{k}"),
        "chain": { "lengths": [0.5, 0.5, 0.5] },
        "tasks": [
            { "id": "limits", "kind": "joint_limits", "params": { "upper": upper, "lower": lower }, "gamma": gain(rng, 0.5, 5.0) },
            { "id": "reach", "kind": "goal_point", "params": { "selector": { "kind": "link_end", "index": n }, "target": [target[0], target[1]] }, "gamma": gain(rng, 1.0, 10.0) },
            { "id": "turn", "kind": "orientation", "params": { "link": n, "theta_d": theta }, "gamma": gain(rng, 1.0, 10.0) }
        ],
        "timeline": [
            { "until_iteration": 600, "stack": { "order": [["limits"], ["reach"], ["turn"]], "mode": mode } }
        ],
        "integrator": { "method": "euler", "dt": 0.01 },
        "initial": { "q": q0 }
    });
    ScenarioFile::from_value(doc)
}

fn safety_invariance(rng: &mut ChaCha8Rng, count: usize) -> Result<CriterionResult> {
    let mut min_h = f64::INFINITY;
    for k in 0..count {
        let run = run_file(adversarial_limits_file(rng, k)?)?;
        min_h = min_h.min(run.summary.min_safety_h.unwrap_or(f64::NAN));
    }
    Ok(CriterionResult::new(
        12,
        min_h >= -1e-6,
        format!("{count} scenarios; min joint-limit h {min_h:.3e} (>= -1e-6)"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_parses() {
        assert_eq!("fast".parse::<Suite>().unwrap(), Suite::Fast);
        assert_eq!("full".parse::<Suite>().unwrap(), Suite::Full);
        assert!("slow".parse::<Suite>().is_err());
    }

    #[test]
    fn unknown_criterion_is_an_error() {
        assert!(run_criterion(13, Suite::Fast, 0).is_err());
    }

    #[test]
    fn adversarial_files_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..5 {
            let f = adversarial_limits_file(&mut rng, k).unwrap();
            let sc = f.build().unwrap();
            assert_eq!(sc.tasks.len(), 8);
        }
    }

    #[test]
    fn known_deviation_only_attaches_to_failures() {
        let ok = CriterionResult::new(1, true, String::new()).deviation("x");
        assert!(ok.known_deviation.is_none());
        let bad = CriterionResult::new(1, false, String::new()).deviation("x");
        assert!(bad.accounted_for() && !bad.passed);
        assert!(bad.to_string().starts_with("[FAIL]  1 independent-task convergence"));
    }
}
