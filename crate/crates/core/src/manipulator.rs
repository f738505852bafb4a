//! Planar serial-chain manipulators.
//!
//! Links are uniform thin rods: the center of mass sits at the link midpoint
//! and the rotational inertia about it is `m L² / 12`. Joint angles are
//! relative and unwrapped, so the absolute orientation of link `k` is the sum
//! of the first `k` joint angles.
//!
//! Link and joint numbers in [`Selector`] are 1-based, matching the usual
//! "link 3 endpoint" wording for a three-link arm.

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Vector};

/// Upper bound on the inertia-matrix condition number accepted by
/// [`control_affine`].
pub const MAX_INERTIA_CONDITION: f64 = 1e12;

/// Selects the task variable `σ = k(q)` a task acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Selector {
    /// Planar position of the distal endpoint of link `k`.
    LinkEnd(usize),
    /// Planar position of the proximal endpoint of link `k` (the base for
    /// `k = 1`).
    LinkBase(usize),
    /// Absolute orientation of link `k`.
    Orientation(usize),
    /// A single joint coordinate.
    Joint(usize),
}

impl Selector {
    /// Dimension of the selected task variable.
    pub fn dim(&self, robot: &Robot) -> usize {
        match (self, robot) {
            (Selector::LinkEnd(_) | Selector::LinkBase(_), Robot::Cartesian(c)) => c.dof,
            (Selector::LinkEnd(_) | Selector::LinkBase(_), Robot::Planar(_)) => 2,
            _ => 1,
        }
    }

    fn describe(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkChain {
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    pub joint_viscous_friction: Vec<f64>,
    pub gravity_accel: [f64; 2],
}

impl LinkChain {
    pub fn new(
        link_lengths: Vec<f64>,
        link_masses: Vec<f64>,
        joint_viscous_friction: Vec<f64>,
        gravity_accel: [f64; 2],
    ) -> Result<Self> {
        let n = link_lengths.len();
        if n == 0 {
            return Err(Error::InvalidChain("at least one link is required".into()));
        }
        if link_masses.len() != n || joint_viscous_friction.len() != n {
            return Err(Error::InvalidChain(format!(
                "{} lengths, {} masses and {} friction coefficients",
                n,
                link_masses.len(),
                joint_viscous_friction.len()
            )));
        }
        if link_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidChain("link lengths must be positive".into()));
        }
        if link_masses.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidChain("link masses must be positive".into()));
        }
        if joint_viscous_friction.iter().any(|&f| !(f >= 0.0 && f.is_finite())) {
            return Err(Error::InvalidChain("friction coefficients must be nonnegative".into()));
        }
        if gravity_accel.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidChain("gravity must be finite".into()));
        }
        Ok(Self {
            link_lengths,
            link_masses,
            joint_viscous_friction,
            gravity_accel,
        })
    }

    /// Unit-mass, frictionless, gravity-free chain; enough for kinematic use.
    pub fn planar(link_lengths: Vec<f64>) -> Result<Self> {
        let n = link_lengths.len();
        Self::new(link_lengths, vec![1.0; n], vec![0.0; n], [0.0, 0.0])
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    fn absolute_angles(&self, q: &Vector) -> Vec<f64> {
        q.iter()
            .scan(0.0, |acc, &qi| {
                *acc += qi;
                Some(*acc)
            })
            .collect()
    }

    fn check_q(&self, q: &Vector) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                actual: q.len(),
                context: "joint configuration",
            });
        }
        Ok(())
    }

    /// Point on link `link` (0-based) at distance `along` from its proximal
    /// joint, together with per-link lever arms used by the Jacobians.
    fn lever_arms(&self, link: usize, along: f64) -> Vec<f64> {
        let mut arms = self.link_lengths[..link].to_vec();
        arms.push(along);
        arms
    }

    fn point(&self, theta: &[f64], arms: &[f64]) -> Vector {
        let (mut x, mut y) = (0.0, 0.0);
        for (a, t) in arms.iter().zip(theta) {
            x += a * t.cos();
            y += a * t.sin();
        }
        Vector::from_vec(vec![x, y])
    }

    fn point_jacobian(&self, theta: &[f64], arms: &[f64]) -> Matrix {
        let n = self.dof();
        let mut j = Matrix::zeros(2, n);
        // column i collects every lever arm distal to joint i
        for i in 0..arms.len() {
            for p in i..arms.len() {
                j[(0, i)] -= arms[p] * theta[p].sin();
                j[(1, i)] += arms[p] * theta[p].cos();
            }
        }
        j
    }

    /// `∂J/∂q_k` for the point described by `arms`.
    fn point_jacobian_derivative(&self, theta: &[f64], arms: &[f64], k: usize) -> Matrix {
        let n = self.dof();
        let mut dj = Matrix::zeros(2, n);
        for i in 0..arms.len() {
            for p in i.max(k)..arms.len() {
                dj[(0, i)] -= arms[p] * theta[p].cos();
                dj[(1, i)] -= arms[p] * theta[p].sin();
            }
        }
        dj
    }

    fn link_index(&self, k: usize, sel: Selector) -> Result<usize> {
        if k == 0 || k > self.dof() {
            return Err(Error::SelectorOutOfRange {
                selector: sel.describe(),
                dof: self.dof(),
            });
        }
        Ok(k - 1)
    }

    pub fn forward_kinematics(&self, q: &Vector, sel: Selector) -> Result<Vector> {
        self.check_q(q)?;
        let theta = self.absolute_angles(q);
        match sel {
            Selector::LinkEnd(k) => {
                let i = self.link_index(k, sel)?;
                Ok(self.point(&theta, &self.link_lengths[..=i]))
            }
            Selector::LinkBase(k) => {
                let i = self.link_index(k, sel)?;
                Ok(self.point(&theta, &self.link_lengths[..i]))
            }
            Selector::Orientation(k) => {
                let i = self.link_index(k, sel)?;
                Ok(Vector::from_element(1, theta[i]))
            }
            Selector::Joint(k) => {
                let i = self.link_index(k, sel)?;
                Ok(Vector::from_element(1, q[i]))
            }
        }
    }

    pub fn task_jacobian(&self, q: &Vector, sel: Selector) -> Result<Matrix> {
        self.check_q(q)?;
        let n = self.dof();
        let theta = self.absolute_angles(q);
        match sel {
            Selector::LinkEnd(k) => {
                let i = self.link_index(k, sel)?;
                Ok(self.point_jacobian(&theta, &self.link_lengths[..=i]))
            }
            Selector::LinkBase(k) => {
                let i = self.link_index(k, sel)?;
                Ok(self.point_jacobian(&theta, &self.link_lengths[..i]))
            }
            Selector::Orientation(k) => {
                let i = self.link_index(k, sel)?;
                Ok(Matrix::from_fn(1, n, |_, c| if c <= i { 1.0 } else { 0.0 }))
            }
            Selector::Joint(k) => {
                let i = self.link_index(k, sel)?;
                Ok(Matrix::from_fn(1, n, |_, c| if c == i { 1.0 } else { 0.0 }))
            }
        }
    }

    /// Partial derivative of the task Jacobian with respect to joint `j`
    /// (0-based).
    pub fn jacobian_derivative(&self, q: &Vector, sel: Selector, j: usize) -> Result<Matrix> {
        self.check_q(q)?;
        let theta = self.absolute_angles(q);
        match sel {
            Selector::LinkEnd(k) => {
                let i = self.link_index(k, sel)?;
                Ok(self.point_jacobian_derivative(&theta, &self.link_lengths[..=i], j))
            }
            Selector::LinkBase(k) => {
                let i = self.link_index(k, sel)?;
                Ok(self.point_jacobian_derivative(&theta, &self.link_lengths[..i], j))
            }
            Selector::Orientation(k) | Selector::Joint(k) => {
                self.link_index(k, sel)?;
                Ok(Matrix::zeros(1, self.dof()))
            }
        }
    }

    fn com_arms(&self, link: usize) -> Vec<f64> {
        self.lever_arms(link, 0.5 * self.link_lengths[link])
    }

    pub fn inertia_matrix(&self, q: &Vector) -> Result<Matrix> {
        self.check_q(q)?;
        let n = self.dof();
        let theta = self.absolute_angles(q);
        let mut d = Matrix::zeros(n, n);
        for link in 0..n {
            let m = self.link_masses[link];
            let l = self.link_lengths[link];
            let jc = self.point_jacobian(&theta, &self.com_arms(link));
            d += m * jc.transpose() * &jc;
            let inertia = m * l * l / 12.0;
            for r in 0..=link {
                for c in 0..=link {
                    d[(r, c)] += inertia;
                }
            }
        }
        Ok(d)
    }

    /// `∂D/∂q_k`.
    pub fn inertia_derivative(&self, q: &Vector, k: usize) -> Result<Matrix> {
        self.check_q(q)?;
        let n = self.dof();
        let theta = self.absolute_angles(q);
        let mut dd = Matrix::zeros(n, n);
        for link in k..n {
            let arms = self.com_arms(link);
            let jc = self.point_jacobian(&theta, &arms);
            let djc = self.point_jacobian_derivative(&theta, &arms, k);
            let cross = djc.transpose() * &jc;
            dd += self.link_masses[link] * (&cross + cross.transpose());
        }
        Ok(dd)
    }

    pub fn dynamics_terms(&self, state: &RobotState) -> Result<DynamicsTerms> {
        state.check(self.dof())?;
        let n = self.dof();
        let q = &state.q;
        let qd = &state.qdot;
        let inertia = self.inertia_matrix(q)?;
        let partials = (0..n)
            .map(|k| self.inertia_derivative(q, k))
            .collect::<Result<Vec<_>>>()?;
        // Christoffel symbols of the first kind
        let mut coriolis = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut cij = 0.0;
                for k in 0..n {
                    let c = 0.5 * (partials[k][(i, j)] + partials[j][(i, k)] - partials[i][(j, k)]);
                    cij += c * qd[k];
                }
                coriolis[(i, j)] = cij;
            }
        }
        let theta = self.absolute_angles(q);
        let g = nalgebra::Vector2::new(self.gravity_accel[0], self.gravity_accel[1]);
        let mut gravity = Vector::zeros(n);
        for link in 0..n {
            let jc = self.point_jacobian(&theta, &self.com_arms(link));
            for c in 0..n {
                gravity[c] -= self.link_masses[link] * (jc[(0, c)] * g[0] + jc[(1, c)] * g[1]);
            }
        }
        let friction = Vector::from_fn(n, |i, _| self.joint_viscous_friction[i] * qd[i]);
        Ok(DynamicsTerms {
            inertia,
            coriolis,
            gravity,
            friction,
        })
    }

    /// `q̈ = D⁻¹(τ − C q̇ − F_v q̇ − g)`.
    pub fn forward_dynamics(&self, state: &RobotState, tau: &Vector) -> Result<Vector> {
        if tau.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                actual: tau.len(),
                context: "joint torques",
            });
        }
        let terms = self.dynamics_terms(state)?;
        let rhs = tau - terms.bias(&state.qdot);
        let chol = terms
            .inertia
            .clone()
            .cholesky()
            .ok_or(Error::IllConditioned(f64::INFINITY))?;
        Ok(chol.solve(&rhs))
    }

    pub fn control_affine(&self, state: &RobotState) -> Result<ControlAffineForm> {
        let n = self.dof();
        let terms = self.dynamics_terms(state)?;
        let eig = terms.inertia.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo <= 0.0 || hi / lo > MAX_INERTIA_CONDITION {
            return Err(Error::IllConditioned(if lo <= 0.0 { f64::INFINITY } else { hi / lo }));
        }
        let d_inv = terms
            .inertia
            .clone()
            .cholesky()
            .ok_or(Error::IllConditioned(f64::INFINITY))?
            .inverse();
        let mut drift = Vector::zeros(2 * n);
        drift.rows_mut(0, n).copy_from(&state.qdot);
        drift.rows_mut(n, n).copy_from(&(-(&d_inv * terms.bias(&state.qdot))));
        let mut input = Matrix::zeros(2 * n, n);
        input.view_mut((n, 0), (n, n)).copy_from(&d_inv);
        Ok(ControlAffineForm { drift, input })
    }

    /// Potential plus kinetic energy; used to check integrators.
    pub fn kinetic_energy(&self, state: &RobotState) -> Result<f64> {
        let d = self.inertia_matrix(&state.q)?;
        Ok(0.5 * state.qdot.dot(&(d * &state.qdot)))
    }
}

/// Joint positions and velocities, `x = [q; q̇]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: Vector,
    pub qdot: Vector,
}

impl RobotState {
    pub fn new(q: Vector, qdot: Vector) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: Vector) -> Self {
        let n = q.len();
        Self { q, qdot: Vector::zeros(n) }
    }

    fn check(&self, n: usize) -> Result<()> {
        for (v, context) in [(&self.q, "joint configuration"), (&self.qdot, "joint velocity")] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: v.len(),
                    context,
                });
            }
        }
        Ok(())
    }

    /// Stacked state vector `[q; q̇]`.
    pub fn stacked(&self) -> Vector {
        let n = self.q.len();
        let mut x = Vector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.q);
        x.rows_mut(n, n).copy_from(&self.qdot);
        x
    }

    pub fn from_stacked(x: &Vector) -> Self {
        let n = x.len() / 2;
        Self {
            q: x.rows(0, n).into_owned(),
            qdot: x.rows(n, n).into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTerms {
    pub inertia: Matrix,
    pub coriolis: Matrix,
    pub gravity: Vector,
    pub friction: Vector,
}

impl DynamicsTerms {
    /// `C q̇ + F_v q̇ + g`.
    pub fn bias(&self, qdot: &Vector) -> Vector {
        &self.coriolis * qdot + &self.friction + &self.gravity
    }
}

/// `ẋ = f(x) + g(x) τ` for `x = [q; q̇]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineForm {
    pub drift: Vector,
    pub input: Matrix,
}

/// Fully actuated point robot whose configuration is its Cartesian
/// position (`q = x`, `J = I`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianRobot {
    pub dof: usize,
}

impl CartesianRobot {
    fn check(&self, q: &Vector, sel: Selector) -> Result<()> {
        if q.len() != self.dof {
            return Err(Error::DimensionMismatch {
                expected: self.dof,
                actual: q.len(),
                context: "joint configuration",
            });
        }
        let ok = match sel {
            Selector::LinkEnd(1) => true,
            Selector::Joint(k) => k >= 1 && k <= self.dof,
            _ => false,
        };
        if !ok {
            return Err(Error::SelectorOutOfRange {
                selector: sel.describe(),
                dof: self.dof,
            });
        }
        Ok(())
    }
}

/// Any robot whose kinematics the task layer can evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Robot {
    Planar(LinkChain),
    Cartesian(CartesianRobot),
}

impl Robot {
    pub fn dof(&self) -> usize {
        match self {
            Robot::Planar(c) => c.dof(),
            Robot::Cartesian(c) => c.dof,
        }
    }

    pub fn chain(&self) -> Option<&LinkChain> {
        match self {
            Robot::Planar(c) => Some(c),
            Robot::Cartesian(_) => None,
        }
    }

    pub fn forward_kinematics(&self, q: &Vector, sel: Selector) -> Result<Vector> {
        match self {
            Robot::Planar(c) => c.forward_kinematics(q, sel),
            Robot::Cartesian(c) => {
                c.check(q, sel)?;
                Ok(match sel {
                    Selector::Joint(k) => Vector::from_element(1, q[k - 1]),
                    _ => q.clone(),
                })
            }
        }
    }

    pub fn task_jacobian(&self, q: &Vector, sel: Selector) -> Result<Matrix> {
        match self {
            Robot::Planar(c) => c.task_jacobian(q, sel),
            Robot::Cartesian(c) => {
                c.check(q, sel)?;
                Ok(match sel {
                    Selector::Joint(k) => {
                        Matrix::from_fn(1, c.dof, |_, col| if col == k - 1 { 1.0 } else { 0.0 })
                    }
                    _ => Matrix::identity(c.dof, c.dof),
                })
            }
        }
    }

    pub fn jacobian_derivative(&self, q: &Vector, sel: Selector, j: usize) -> Result<Matrix> {
        match self {
            Robot::Planar(c) => c.jacobian_derivative(q, sel, j),
            Robot::Cartesian(c) => {
                c.check(q, sel)?;
                let rows = sel.dim(self);
                Ok(Matrix::zeros(rows, c.dof))
            }
        }
    }
}
