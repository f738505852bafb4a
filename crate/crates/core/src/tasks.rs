//! Extended set-based tasks.
//!
//! Each task is a barrier `h(σ, t)` on a task variable `σ = k(q)` selected
//! from the robot. Evaluation returns `h` together with its first and second
//! partial derivatives in `q` and `t`; the second derivatives feed the
//! auxiliary barrier `h′ = ḣ + γ(h)` used by torque-controlled models.

use serde::{Deserialize, Serialize};

use crate::linalg::singular_values;
use crate::manipulator::{Robot, RobotState, Selector};
use crate::{Error, Matrix, Result, Vector};

pub const DEFAULT_RANK_TOL: f64 = 5e-3;

/// Extended class-K function `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassK {
    /// `γ(s) = Γ s`.
    Linear { gain: f64 },
    /// `γ(s) = Γ s³`.
    Cubic { gain: f64 },
}

impl Default for ClassK {
    fn default() -> Self {
        ClassK::Linear { gain: 1.0 }
    }
}

impl ClassK {
    pub fn linear(gain: f64) -> Self {
        ClassK::Linear { gain }
    }

    pub fn gain(&self) -> f64 {
        match *self {
            ClassK::Linear { gain } | ClassK::Cubic { gain } => gain,
        }
    }

    pub fn with_gain(&self, gain: f64) -> Self {
        match self {
            ClassK::Linear { .. } => ClassK::Linear { gain },
            ClassK::Cubic { .. } => ClassK::Cubic { gain },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gain();
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::InvalidTask(format!("class-K gain must be positive, got {g}")));
        }
        Ok(())
    }

    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            ClassK::Linear { gain } => gain * s,
            ClassK::Cubic { gain } => gain * s * s * s,
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match *self {
            ClassK::Linear { gain } => gain,
            ClassK::Cubic { gain } => 3.0 * gain * s * s,
        }
    }

    /// Global Lipschitz constant, when one exists.
    pub fn lipschitz(&self) -> Option<f64> {
        match *self {
            ClassK::Linear { gain } => Some(gain),
            ClassK::Cubic { .. } => None,
        }
    }
}

/// Desired value `σ_d(t)` of a goal-point task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Constant { value: Vec<f64> },
    /// `σ_d(t) = start + velocity · t`.
    Linear { start: Vec<f64>, velocity: Vec<f64> },
}

impl Trajectory {
    pub fn constant(value: Vec<f64>) -> Self {
        Trajectory::Constant { value }
    }

    pub fn dim(&self) -> usize {
        match self {
            Trajectory::Constant { value } => value.len(),
            Trajectory::Linear { start, .. } => start.len(),
        }
    }

    pub fn at(&self, t: f64) -> Vector {
        match self {
            Trajectory::Constant { value } => Vector::from_column_slice(value),
            Trajectory::Linear { start, velocity } => {
                Vector::from_fn(start.len(), |i, _| start[i] + velocity[i] * t)
            }
        }
    }

    pub fn rate(&self) -> Vector {
        match self {
            Trajectory::Constant { value } => Vector::zeros(value.len()),
            Trajectory::Linear { velocity, .. } => Vector::from_column_slice(velocity),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        match self {
            Trajectory::Constant { .. } => true,
            Trajectory::Linear { velocity, .. } => velocity.iter().all(|v| *v == 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// `h = −½‖σ − σ_d(t)‖²`.
    GoalPoint { selector: Selector, target: Trajectory },
    /// `h = q⁺ − q_i` for the 1-based joint `joint`.
    JointUpper { joint: usize, bound: f64 },
    /// `h = q_i − q⁻`.
    JointLower { joint: usize, bound: f64 },
    /// `h = −½(θ_k − θ_d)²` on the absolute orientation of link `link`.
    Orientation { link: usize, theta_d: f64 },
    /// `h = −½(θ_k − β(q))²` where `β` is the bearing from the proximal end
    /// of link `link` to `target`.
    LookAtPoint { link: usize, target: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsbTask {
    pub id: String,
    pub kind: TaskKind,
    pub gamma: ClassK,
    /// Outer class-K function of the auxiliary barrier; defaults to `gamma`.
    pub gamma_prime: Option<ClassK>,
    pub relative_degree: u8,
    pub safety_critical: bool,
}

/// Value and derivatives of a task barrier at `(q, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub h: f64,
    pub dh_dsigma: Vector,
    pub dh_dq: Vector,
    pub dh_dt: f64,
    pub hess_q: Matrix,
    pub d2h_dtdq: Vector,
    pub d2h_dt2: f64,
}

pub fn goal_point_task(
    id: impl Into<String>,
    selector: Selector,
    target: Trajectory,
    gamma: ClassK,
) -> EsbTask {
    EsbTask {
        id: id.into(),
        kind: TaskKind::GoalPoint { selector, target },
        gamma,
        gamma_prime: None,
        relative_degree: 1,
        safety_critical: false,
    }
}

pub fn orientation_task(id: impl Into<String>, link: usize, theta_d: f64, gamma: ClassK) -> EsbTask {
    EsbTask {
        id: id.into(),
        kind: TaskKind::Orientation { link, theta_d },
        gamma,
        gamma_prime: None,
        relative_degree: 1,
        safety_critical: false,
    }
}

pub fn look_at_point_task(
    id: impl Into<String>,
    link: usize,
    target: [f64; 2],
    gamma: ClassK,
) -> EsbTask {
    EsbTask {
        id: id.into(),
        kind: TaskKind::LookAtPoint { link, target },
        gamma,
        gamma_prime: None,
        relative_degree: 1,
        safety_critical: false,
    }
}

/// Upper and lower limit barriers for every joint, ids `<prefix>_upper_<i>`
/// and `<prefix>_lower_<i>` (1-based).
pub fn joint_limit_tasks(
    prefix: &str,
    q_plus: &[f64],
    q_minus: &[f64],
    gamma: ClassK,
) -> Result<Vec<EsbTask>> {
    if q_plus.len() != q_minus.len() {
        return Err(Error::DimensionMismatch {
            expected: q_plus.len(),
            actual: q_minus.len(),
            context: "joint limits",
        });
    }
    let mut tasks = Vec::with_capacity(2 * q_plus.len());
    for (i, (&hi, &lo)) in q_plus.iter().zip(q_minus).enumerate() {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidTask(format!(
                "joint {}: lower limit {lo} is not below upper limit {hi}",
                i + 1
            )));
        }
        for (side, kind) in [
            ("upper", TaskKind::JointUpper { joint: i + 1, bound: hi }),
            ("lower", TaskKind::JointLower { joint: i + 1, bound: lo }),
        ] {
            tasks.push(EsbTask {
                id: format!("{prefix}_{side}_{}", i + 1),
                kind,
                gamma,
                gamma_prime: None,
                relative_degree: 1,
                safety_critical: true,
            });
        }
    }
    Ok(tasks)
}

/// `a` shifted by a multiple of 2π to lie within π of `reference`.
pub fn unwrap_near(a: f64, reference: f64) -> f64 {
    use std::f64::consts::TAU;
    a + TAU * ((reference - a) / TAU).round()
}

impl EsbTask {
    pub fn validate(&self, robot: &Robot) -> Result<()> {
        self.gamma.validate()?;
        if let Some(g) = &self.gamma_prime {
            g.validate()?;
        }
        if !(1..=2).contains(&self.relative_degree) {
            return Err(Error::InvalidTask(format!(
                "task {}: relative degree must be 1 or 2",
                self.id
            )));
        }
        // surfaces selector and dimension errors
        self.evaluate(robot, &Vector::zeros(robot.dof()), 0.0)
            .map(|_| ())
            .or_else(|e| match e {
                // a look-at target on the base at q = 0 is not a schema error
                Error::InvalidTask(_) if matches!(self.kind, TaskKind::LookAtPoint { .. }) => Ok(()),
                e => Err(e),
            })
    }

    pub fn gamma_prime(&self) -> ClassK {
        self.gamma_prime.unwrap_or(self.gamma)
    }

    pub fn is_time_invariant(&self) -> bool {
        match &self.kind {
            TaskKind::GoalPoint { target, .. } => target.is_time_invariant(),
            _ => true,
        }
    }

    /// Task variable `σ` at `q`.
    pub fn sigma(&self, robot: &Robot, q: &Vector) -> Result<Vector> {
        match &self.kind {
            TaskKind::GoalPoint { selector, .. } => robot.forward_kinematics(q, *selector),
            TaskKind::JointUpper { joint, .. } | TaskKind::JointLower { joint, .. } => {
                robot.forward_kinematics(q, Selector::Joint(*joint))
            }
            TaskKind::Orientation { link, .. } | TaskKind::LookAtPoint { link, .. } => {
                robot.forward_kinematics(q, Selector::Orientation(*link))
            }
        }
    }

    pub fn h(&self, robot: &Robot, q: &Vector, t: f64) -> Result<f64> {
        Ok(self.evaluate(robot, q, t)?.h)
    }

    pub fn evaluate(&self, robot: &Robot, q: &Vector, t: f64) -> Result<TaskEval> {
        let n = robot.dof();
        match &self.kind {
            TaskKind::GoalPoint { selector, target } => {
                let sigma = robot.forward_kinematics(q, *selector)?;
                if sigma.len() != target.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: sigma.len(),
                        actual: target.dim(),
                        context: "goal-point target",
                    });
                }
                let j = robot.task_jacobian(q, *selector)?;
                let dj = (0..n)
                    .map(|k| robot.jacobian_derivative(q, *selector, k))
                    .collect::<Result<Vec<_>>>()?;
                Ok(quadratic_error(sigma - target.at(t), &j, &dj, &target.rate()))
            }
            TaskKind::Orientation { link, theta_d } => {
                let sel = Selector::Orientation(*link);
                let sigma = robot.forward_kinematics(q, sel)?;
                let j = robot.task_jacobian(q, sel)?;
                let dj = vec![Matrix::zeros(1, n); n];
                Ok(quadratic_error(sigma.add_scalar(-theta_d), &j, &dj, &Vector::zeros(1)))
            }
            TaskKind::JointUpper { joint, bound } | TaskKind::JointLower { joint, bound } => {
                let upper = matches!(self.kind, TaskKind::JointUpper { .. });
                let qi = robot.forward_kinematics(q, Selector::Joint(*joint))?[0];
                let sign = if upper { -1.0 } else { 1.0 };
                let h = if upper { bound - qi } else { qi - bound };
                let mut dh_dq = Vector::zeros(n);
                dh_dq[joint - 1] = sign;
                Ok(TaskEval {
                    h,
                    dh_dsigma: Vector::from_element(1, sign),
                    dh_dq,
                    dh_dt: 0.0,
                    hess_q: Matrix::zeros(n, n),
                    d2h_dtdq: Vector::zeros(n),
                    d2h_dt2: 0.0,
                })
            }
            TaskKind::LookAtPoint { link, target } => self.look_at(robot, q, *link, *target),
        }
    }

    fn look_at(&self, robot: &Robot, q: &Vector, link: usize, target: [f64; 2]) -> Result<TaskEval> {
        let n = robot.dof();
        let sel_o = Selector::Orientation(link);
        let sel_b = Selector::LinkBase(link);
        let sigma = robot.forward_kinematics(q, sel_o)?[0];
        let base = robot.forward_kinematics(q, sel_b)?;
        let (dx, dy) = (target[0] - base[0], target[1] - base[1]);
        let r2 = dx * dx + dy * dy;
        if r2 < 1e-18 {
            return Err(Error::InvalidTask(format!(
                "task {}: look-at target coincides with the base of link {link}",
                self.id
            )));
        }
        let beta = unwrap_near(dy.atan2(dx), sigma);
        let e = sigma - beta;

        let j_sigma = robot.task_jacobian(q, sel_o)?;
        let j_base = robot.task_jacobian(q, sel_b)?;
        // ∂β/∂base
        let g = nalgebra::Vector2::new(dy / r2, -dx / r2);
        let r4 = r2 * r2;
        let w = nalgebra::Matrix2::new(
            2.0 * dx * dy,
            dy * dy - dx * dx,
            dy * dy - dx * dx,
            -2.0 * dx * dy,
        ) / r4;
        let beta_q = Vector::from_fn(n, |i, _| g[0] * j_base[(0, i)] + g[1] * j_base[(1, i)]);
        let de_dq = Vector::from_fn(n, |i, _| j_sigma[(0, i)] - beta_q[i]);

        let mut hess_beta = Matrix::zeros(n, n);
        for jj in 0..n {
            let dj = robot.jacobian_derivative(q, sel_b, jj)?;
            for i in 0..n {
                let ci = nalgebra::Vector2::new(j_base[(0, i)], j_base[(1, i)]);
                let cj = nalgebra::Vector2::new(j_base[(0, jj)], j_base[(1, jj)]);
                hess_beta[(i, jj)] = ci.dot(&(w * cj)) + g[0] * dj[(0, i)] + g[1] * dj[(1, i)];
            }
        }
        let hess_q = -(&de_dq * de_dq.transpose()) + e * hess_beta;
        Ok(TaskEval {
            h: -0.5 * e * e,
            dh_dsigma: Vector::from_element(1, -e),
            dh_dq: -e * de_dq,
            dh_dt: 0.0,
            hess_q,
            d2h_dtdq: Vector::zeros(n),
            d2h_dt2: 0.0,
        })
    }
}

/// Derivatives of `h = −½‖e‖²` with `e = σ(q) − σ_d(t)`, `∂e/∂t = −ṡ_d`.
fn quadratic_error(e: Vector, j: &Matrix, dj: &[Matrix], sd_rate: &Vector) -> TaskEval {
    let n = j.ncols();
    let dh_dq = -(j.transpose() * &e);
    let mut hess_q = -(j.transpose() * j);
    for (col, djc) in dj.iter().enumerate() {
        // column `col` of ∂J/∂q_col contributes to row i via ∂J_i/∂q_col
        let contrib = djc.transpose() * &e;
        for i in 0..n {
            hess_q[(i, col)] -= contrib[i];
        }
    }
    TaskEval {
        h: -0.5 * e.norm_squared(),
        dh_dsigma: -e.clone(),
        dh_dq,
        dh_dt: e.dot(sd_rate),
        hess_q,
        d2h_dtdq: j.transpose() * sd_rate,
        d2h_dt2: -sd_rate.norm_squared(),
    }
}

/// `h′` and its partial derivatives in `(q, q̇, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryCbf {
    pub h: f64,
    pub h_prime: f64,
    pub dq: Vector,
    pub dqdot: Vector,
    pub dt: f64,
    pub gamma_prime: ClassK,
}

pub fn auxiliary_cbf(task: &EsbTask, robot: &Robot, state: &RobotState, t: f64) -> Result<AuxiliaryCbf> {
    let ev = task.evaluate(robot, &state.q, t)?;
    let n = robot.dof();
    if task.relative_degree == 1 {
        return Ok(AuxiliaryCbf {
            h: ev.h,
            h_prime: ev.h,
            dq: ev.dh_dq,
            dqdot: Vector::zeros(n),
            dt: ev.dh_dt,
            gamma_prime: task.gamma_prime(),
        });
    }
    let qd = &state.qdot;
    let h_dot = ev.dh_dq.dot(qd) + ev.dh_dt;
    let slope = task.gamma.derivative(ev.h);
    Ok(AuxiliaryCbf {
        h: ev.h,
        h_prime: h_dot + task.gamma.eval(ev.h),
        dq: &ev.hess_q * qd + &ev.d2h_dtdq + slope * &ev.dh_dq,
        dqdot: ev.dh_dq.clone(),
        dt: ev.d2h_dtdq.dot(qd) + ev.d2h_dt2 + slope * ev.dh_dt,
        gamma_prime: task.gamma_prime(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relationship {
    Orthogonal,
    Independent,
    Dependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipReport {
    pub pair: (String, String),
    pub classification: Relationship,
    pub gradient_angle: f64,
    pub rank_tolerance: f64,
}

/// Classifies two nonzero gradient rows.
pub fn classify_gradients(gi: &Vector, gj: &Vector, rank_tol: f64) -> Result<(Relationship, f64)> {
    let (ni, nj) = (gi.norm(), gj.norm());
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroGradient("barrier gradient vanishes".into()));
    }
    let cos = (gi.dot(gj) / (ni * nj)).clamp(-1.0, 1.0);
    let angle = cos.acos();
    if cos.abs() <= rank_tol {
        return Ok((Relationship::Orthogonal, angle));
    }
    let stacked = Matrix::from_rows(&[gi.transpose(), gj.transpose()]);
    let sv = singular_values(&stacked);
    let rel = if sv[1] <= rank_tol * sv[0] {
        Relationship::Dependent
    } else {
        Relationship::Independent
    };
    Ok((rel, angle))
}

pub fn classify_pair(
    task_i: &EsbTask,
    task_j: &EsbTask,
    robot: &Robot,
    q: &Vector,
    t: f64,
    rank_tol: f64,
) -> Result<RelationshipReport> {
    let gi = task_i.evaluate(robot, q, t)?.dh_dq;
    let gj = task_j.evaluate(robot, q, t)?.dh_dq;
    let (classification, gradient_angle) = classify_gradients(&gi, &gj, rank_tol).map_err(|_| {
        let which = if gi.norm() == 0.0 { &task_i.id } else { &task_j.id };
        Error::ZeroGradient(which.clone())
    })?;
    Ok(RelationshipReport {
        pair: (task_i.id.clone(), task_j.id.clone()),
        classification,
        gradient_angle,
        rank_tolerance: rank_tol,
    })
}

fn relative_rank(sv: &[f64], tol: f64) -> usize {
    match sv.first() {
        Some(&s0) if s0 > 0.0 => sv.iter().filter(|&&s| s > tol * s0).count(),
        _ => 0,
    }
}

/// Orthonormal basis of the row space as columns.
fn row_basis(j: &Matrix, tol: f64) -> Matrix {
    let svd = j.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > tol * smax)
        .collect();
    Matrix::from_fn(j.ncols(), keep.len(), |r, c| v_t[(keep[c], r)])
}

/// Jacobian-level relationship of two tasks. The reported angle is the
/// smallest principal angle between the two row spaces.
pub fn classify_pair_jacobian(ji: &Matrix, jj: &Matrix, rank_tol: f64) -> Result<RelationshipReport> {
    if ji.ncols() != jj.ncols() {
        return Err(Error::DimensionMismatch {
            expected: ji.ncols(),
            actual: jj.ncols(),
            context: "task Jacobian columns",
        });
    }
    let si = singular_values(ji);
    let sj = singular_values(jj);
    let (Some(&ni), Some(&nj)) = (si.first(), sj.first()) else {
        return Err(Error::ZeroGradient("empty Jacobian".into()));
    };
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroGradient("Jacobian vanishes".into()));
    }
    let cross = singular_values(&(ji * jj.transpose()));
    let bi = row_basis(ji, rank_tol);
    let bj = row_basis(jj, rank_tol);
    let cos_max = singular_values(&(bi.transpose() * bj)).first().copied().unwrap_or(0.0);
    let angle = cos_max.clamp(-1.0, 1.0).acos();
    let classification = if cross[0] <= rank_tol * ni * nj {
        Relationship::Orthogonal
    } else {
        let stacked = crate::linalg::vstack(&[ji.clone(), jj.clone()]);
        let r = relative_rank(&singular_values(&stacked), rank_tol);
        if r == relative_rank(&si, rank_tol) + relative_rank(&sj, rank_tol) {
            Relationship::Independent
        } else {
            Relationship::Dependent
        }
    };
    Ok(RelationshipReport {
        pair: ("J_i".into(), "J_j".into()),
        classification,
        gradient_angle: angle,
        rank_tolerance: rank_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manipulator::{CartesianRobot, LinkChain};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn arm() -> Robot {
        Robot::Planar(LinkChain::planar(vec![0.5, 0.5, 0.5]).unwrap())
    }

    fn all_kinds() -> Vec<EsbTask> {
        let g = ClassK::default();
        let mut v = vec![
            goal_point_task("p3", Selector::LinkEnd(3), Trajectory::constant(vec![0.25, 0.75]), g),
            goal_point_task(
                "p2",
                Selector::LinkEnd(2),
                Trajectory::Linear {
                    start: vec![0.1, 0.4],
                    velocity: vec![0.3, -0.2],
                },
                g,
            ),
            goal_point_task("z", Selector::Joint(2), Trajectory::constant(vec![0.3]), g),
            orientation_task("o", 3, PI / 6.0, g),
            look_at_point_task("look", 3, [1.0, 0.5], g),
        ];
        v.extend(joint_limit_tasks("lim", &[PI, 2.0, 2.0], &[-PI, -2.0, -2.0], g).unwrap());
        v
    }

    fn fd_grad(task: &EsbTask, robot: &Robot, q: &Vector, t: f64) -> Vector {
        let eps = 1e-6;
        Vector::from_fn(q.len(), |i, _| {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += eps;
            qm[i] -= eps;
            (task.h(robot, &qp, t).unwrap() - task.h(robot, &qm, t).unwrap()) / (2.0 * eps)
        })
    }

    #[test]
    fn goal_point_examples() {
        let r = Robot::Cartesian(CartesianRobot { dof: 2 });
        let t = goal_point_task("g", Selector::LinkEnd(1), Trajectory::constant(vec![1.0, 0.0]), ClassK::default());
        let ev = t.evaluate(&r, &Vector::zeros(2), 0.0).unwrap();
        assert_eq!(ev.h, -0.5);
        assert_eq!(ev.dh_dsigma, Vector::from_vec(vec![1.0, 0.0]));
        assert_eq!(ev.dh_dt, 0.0);
        let at = t.evaluate(&r, &Vector::from_vec(vec![1.0, 0.0]), 0.0).unwrap();
        assert_eq!(at.h, 0.0);
        assert_eq!(at.dh_dq, Vector::zeros(2));
    }

    #[test]
    fn goal_point_dimension_mismatch() {
        let t = goal_point_task("g", Selector::LinkEnd(3), Trajectory::constant(vec![1.0]), ClassK::default());
        assert!(matches!(
            t.evaluate(&arm(), &Vector::zeros(3), 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn joint_limit_examples() {
        let qp = [PI, 2.0 * PI / 3.0, 2.0 * PI / 3.0];
        let qm = qp.map(|x| -x);
        let tasks = joint_limit_tasks("lim", &qp, &qm, ClassK::default()).unwrap();
        assert_eq!(tasks.len(), 6);
        assert!(tasks.iter().all(|t| t.safety_critical));
        let r = arm();
        let q0 = Vector::zeros(3);
        let uppers: Vec<f64> = tasks.iter().step_by(2).map(|t| t.h(&r, &q0, 0.0).unwrap()).collect();
        assert_eq!(uppers, qp.to_vec());
        let lowers: Vec<f64> = tasks.iter().skip(1).step_by(2).map(|t| t.h(&r, &q0, 0.0).unwrap()).collect();
        assert_eq!(uppers, lowers);
        let at_bound = Vector::from_column_slice(&qp);
        assert_eq!(tasks[0].h(&r, &at_bound, 0.0).unwrap(), 0.0);
        let g = tasks[2].evaluate(&r, &q0, 0.0).unwrap().dh_dq;
        assert_eq!(g, Vector::from_vec(vec![0.0, -1.0, 0.0]));
        assert!(joint_limit_tasks("x", &[1.0], &[1.0], ClassK::default()).is_err());
    }

    #[test]
    fn orientation_examples() {
        let r = arm();
        let t = orientation_task("o", 3, 0.5, ClassK::default());
        let q = Vector::from_vec(vec![0.2, 0.2, 0.1]);
        assert!(t.h(&r, &q, 0.0).unwrap().abs() < 1e-15);
        let q = Vector::from_vec(vec![0.7, 0.5, 0.3]);
        assert!((t.h(&r, &q, 0.0).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn look_at_examples() {
        let r = arm();
        let t = look_at_point_task("l", 3, [1.0, 1.0], ClassK::default());
        // base of link 3 at (1, 0) when folded flat; pointing straight up
        let q = Vector::from_vec(vec![0.0, 0.0, PI / 2.0]);
        assert!(t.h(&r, &q, 0.0).unwrap().abs() < 1e-12);
        let q = Vector::from_vec(vec![0.0, 0.0, PI / 2.0 + 1.0]);
        assert!((t.h(&r, &q, 0.0).unwrap() + 0.5).abs() < 1e-12);
        // unwrapping keeps the error small when θ is near ±π crossings
        let q = Vector::from_vec(vec![0.0, 0.0, PI / 2.0 + 2.0 * PI]);
        assert!(t.h(&r, &q, 0.0).unwrap().abs() < 1e-12);
        let bad = look_at_point_task("l", 3, [1.0, 0.0], ClassK::default());
        assert!(bad.h(&r, &Vector::zeros(3), 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let r = Robot::Planar(LinkChain::planar(vec![0.5, 0.4, 0.6]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for task in all_kinds() {
            for _ in 0..50 {
                let q = Vector::from_fn(3, |_, _| rng.random_range(-PI..PI));
                let t = rng.random_range(0.0..2.0);
                let an = task.evaluate(&r, &q, t).unwrap().dh_dq;
                let fd = fd_grad(&task, &r, &q, t);
                let err = (&an - &fd).amax() / an.amax().max(1.0);
                assert!(err < 1e-6, "{}: {err}", task.id);
            }
        }
    }

    #[test]
    fn hessians_match_finite_differences() {
        let r = Robot::Planar(LinkChain::planar(vec![0.5, 0.4, 0.6]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let eps = 1e-6;
        for task in all_kinds() {
            for _ in 0..20 {
                let q = Vector::from_fn(3, |_, _| rng.random_range(-PI..PI));
                let t = 0.7;
                let ev = task.evaluate(&r, &q, t).unwrap();
                for k in 0..3 {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[k] += eps;
                    qm[k] -= eps;
                    let col = (task.evaluate(&r, &qp, t).unwrap().dh_dq
                        - task.evaluate(&r, &qm, t).unwrap().dh_dq)
                        / (2.0 * eps);
                    let err = (ev.hess_q.column(k) - col).amax();
                    assert!(err < 1e-5, "{} col {k}: {err}", task.id);
                }
                let dt = (task.evaluate(&r, &q, t + eps).unwrap().dh_dq
                    - task.evaluate(&r, &q, t - eps).unwrap().dh_dq)
                    / (2.0 * eps);
                assert!((&ev.d2h_dtdq - dt).amax() < 1e-6);
                let ht = (task.h(&r, &q, t + eps).unwrap() - task.h(&r, &q, t - eps).unwrap()) / (2.0 * eps);
                assert!((ev.dh_dt - ht).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn auxiliary_barrier_examples() {
        let r = arm();
        let mut t = goal_point_task("g", Selector::LinkEnd(3), Trajectory::constant(vec![0.5, 0.5]), ClassK::linear(3.0));
        let q = Vector::from_vec(vec![0.3, 0.4, -0.2]);
        let rest = RobotState::at_rest(q.clone());
        let a = auxiliary_cbf(&t, &r, &rest, 0.0).unwrap();
        assert_eq!(a.h_prime, a.h);
        t.relative_degree = 2;
        let a = auxiliary_cbf(&t, &r, &rest, 0.0).unwrap();
        assert!((a.h_prime - 3.0 * a.h).abs() < 1e-15);
        let at_goal = RobotState::at_rest(Vector::zeros(3));
        let g0 = goal_point_task("g", Selector::LinkEnd(3), Trajectory::constant(vec![1.5, 0.0]), ClassK::linear(3.0));
        let mut g0 = g0;
        g0.relative_degree = 2;
        assert_eq!(auxiliary_cbf(&g0, &r, &at_goal, 0.0).unwrap().h_prime, 0.0);
    }

    #[test]
    fn auxiliary_gradient_matches_finite_differences() {
        let r = Robot::Planar(LinkChain::planar(vec![0.5, 0.4, 0.6]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let eps = 1e-6;
        for mut task in all_kinds() {
            task.relative_degree = 2;
            task.gamma = ClassK::Cubic { gain: 2.0 };
            for _ in 0..10 {
                let q = Vector::from_fn(3, |_, _| rng.random_range(-PI..PI));
                let qd = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let t = 0.4;
                let s = RobotState::new(q.clone(), qd.clone());
                let a = auxiliary_cbf(&task, &r, &s, t).unwrap();
                let x = s.stacked();
                let mut fd = Vector::zeros(6);
                for i in 0..6 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += eps;
                    xm[i] -= eps;
                    let hp = auxiliary_cbf(&task, &r, &RobotState::from_stacked(&xp), t).unwrap().h_prime;
                    let hm = auxiliary_cbf(&task, &r, &RobotState::from_stacked(&xm), t).unwrap().h_prime;
                    fd[i] = (hp - hm) / (2.0 * eps);
                }
                let mut an = Vector::zeros(6);
                an.rows_mut(0, 3).copy_from(&a.dq);
                an.rows_mut(3, 3).copy_from(&a.dqdot);
                assert!((&an - &fd).amax() / an.amax().max(1.0) < 1e-4, "{}", task.id);
                let ft = (auxiliary_cbf(&task, &r, &s, t + eps).unwrap().h_prime
                    - auxiliary_cbf(&task, &r, &s, t - eps).unwrap().h_prime)
                    / (2.0 * eps);
                assert!((a.dt - ft).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn class_k_properties() {
        for g in [ClassK::linear(2.0), ClassK::Cubic { gain: 0.5 }] {
            g.validate().unwrap();
            assert_eq!(g.eval(0.0), 0.0);
            let grid: Vec<f64> = (-100..=100).map(|k| k as f64 * 0.05).collect();
            assert!(grid.windows(2).all(|w| g.eval(w[1]) > g.eval(w[0])));
        }
        assert_eq!(ClassK::linear(2.0).lipschitz(), Some(2.0));
        assert_eq!(ClassK::Cubic { gain: 1.0 }.lipschitz(), None);
        assert!(ClassK::linear(0.0).validate().is_err());
    }

    #[test]
    fn classify_examples() {
        let r = arm();
        let g = ClassK::default();
        let a = goal_point_task("a", Selector::LinkEnd(3), Trajectory::constant(vec![0.5, 1.0]), g);
        let b = goal_point_task("b", Selector::LinkEnd(3), Trajectory::constant(vec![0.5, 1.0]), g);
        let q = Vector::from_vec(vec![0.1, 0.5, 0.4]);
        let rep = classify_pair(&a, &b, &r, &q, 0.0, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.classification, Relationship::Dependent);
        assert!(rep.gradient_angle.abs() < 1e-6);

        let j1 = goal_point_task("j1", Selector::Joint(1), Trajectory::constant(vec![1.0]), g);
        let j2 = goal_point_task("j2", Selector::Joint(2), Trajectory::constant(vec![-1.0]), g);
        let rep = classify_pair(&j1, &j2, &r, &q, 0.0, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.classification, Relationship::Orthogonal);
        assert!((rep.gradient_angle - PI / 2.0).abs() < 1e-12);

        let at_goal = goal_point_task("z", Selector::Joint(1), Trajectory::constant(vec![0.1]), g);
        assert!(matches!(
            classify_pair(&at_goal, &j2, &r, &q, 0.0, DEFAULT_RANK_TOL),
            Err(Error::ZeroGradient(_))
        ));
    }

    #[test]
    fn classify_jacobian_examples() {
        let ji = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let jj = Matrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 2.0, 1.0]);
        let rep = classify_pair_jacobian(&ji, &jj, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.classification, Relationship::Orthogonal);
        assert!((rep.gradient_angle - PI / 2.0).abs() < 1e-9);

        let a = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -0.3, 0.7, 1.1]);
        let rep = classify_pair_jacobian(&a, &(2.0 * &a), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.classification, Relationship::Dependent);
        assert!(rep.gradient_angle.abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let ji = Matrix::from_fn(1, 4, |_, _| rng.random_range(-1.0..1.0));
            let jj = Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
            let stacked = crate::linalg::vstack(&[ji.clone(), jj.clone()]);
            let expected = if singular_values(&stacked)[2] > DEFAULT_RANK_TOL * singular_values(&stacked)[0] {
                Relationship::Independent
            } else {
                Relationship::Dependent
            };
            let rep = classify_pair_jacobian(&ji, &jj, DEFAULT_RANK_TOL).unwrap();
            if rep.classification != Relationship::Orthogonal {
                assert_eq!(rep.classification, expected);
            }
        }
    }

    proptest! {
        #[test]
        fn jacobian_orthogonal_pairs_are_gradient_orthogonal(
            q in proptest::collection::vec(-3.0f64..3.0, 4),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            // disjoint joint support makes J_i J_jᵀ = 0 at every q
            let r = Robot::Planar(LinkChain::planar(vec![0.5; 4]).unwrap());
            let ti = goal_point_task("i", Selector::Orientation(2), Trajectory::constant(vec![a]), ClassK::default());
            let tj = goal_point_task("j", Selector::Joint(4), Trajectory::constant(vec![b]), ClassK::default());
            let q = Vector::from_vec(q);
            if let Ok(rep) = classify_pair(&ti, &tj, &r, &q, 0.0, DEFAULT_RANK_TOL) {
                prop_assert_eq!(rep.classification, Relationship::Orthogonal);
            }
        }

        #[test]
        fn jacobian_independent_pairs_are_gradient_independent(
            q in proptest::collection::vec(-3.0f64..3.0, 3),
            target in proptest::collection::vec(-1.0f64..1.0, 2),
            theta in -3.0f64..3.0,
        ) {
            let r = arm();
            let ti = goal_point_task("i", Selector::Joint(1), Trajectory::constant(vec![theta]), ClassK::default());
            let tj = goal_point_task("j", Selector::LinkEnd(3), Trajectory::constant(target), ClassK::default());
            let q = Vector::from_vec(q);
            let ji = r.task_jacobian(&q, Selector::Joint(1)).unwrap();
            let jj = r.task_jacobian(&q, Selector::LinkEnd(3)).unwrap();
            let jac = classify_pair_jacobian(&ji, &jj, 1e-2).unwrap();
            let gi = ti.evaluate(&r, &q, 0.0).unwrap().dh_dq;
            let gj = tj.evaluate(&r, &q, 0.0).unwrap().dh_dq;
            prop_assume!(gi.norm() > 1e-3 && gj.norm() > 1e-3);
            if jac.classification == Relationship::Independent {
                let (rel, _) = classify_gradients(&gi, &gj, 1e-9).unwrap();
                prop_assert_ne!(rel, Relationship::Dependent);
            }
        }

        #[test]
        fn orthogonal_implies_rank_two(
            gi in proptest::collection::vec(-1.0f64..1.0, 4),
            gj in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let gi = Vector::from_vec(gi);
            let gj = Vector::from_vec(gj);
            prop_assume!(gi.norm() > 1e-3 && gj.norm() > 1e-3);
            let (rel, _) = classify_gradients(&gi, &gj, DEFAULT_RANK_TOL).unwrap();
            if rel == Relationship::Orthogonal {
                let sv = singular_values(&Matrix::from_rows(&[gi.transpose(), gj.transpose()]));
                prop_assert!(sv[1] > DEFAULT_RANK_TOL * sv[0]);
            }
        }
    }
}
