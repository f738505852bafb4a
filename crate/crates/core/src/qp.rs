//! Dense strictly convex QP solver and closed-form KKT references.
//!
//! Problems have the form `min ½ zᵀHz + cᵀz  s.t.  Az ≥ b`. The solver is
//! the dual active-set method of Goldfarb and Idnani: it starts from the
//! unconstrained minimizer and adds violated constraints one at a time,
//! keeping the dual iterate feasible throughout.

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Vector};

/// Named slices of the decision vector `z = [u; δ; v]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarLayout {
    pub n_u: usize,
    pub n_delta: usize,
    pub n_v: usize,
}

impl VarLayout {
    pub fn len(&self) -> usize {
        self.n_u + self.n_delta + self.n_v
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn delta_offset(&self) -> usize {
        self.n_u
    }

    pub fn v_offset(&self) -> usize {
        self.n_u + self.n_delta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub c: Vector,
    pub a: Matrix,
    pub b: Vector,
    pub layout: VarLayout,
}

impl QpProblem {
    pub fn new(h: Matrix, c: Vector, a: Matrix, b: Vector) -> Result<Self> {
        let n = c.len();
        let layout = VarLayout {
            n_u: n,
            ..Default::default()
        };
        Self::with_layout(h, c, a, b, layout)
    }

    pub fn with_layout(h: Matrix, c: Vector, a: Matrix, b: Vector, layout: VarLayout) -> Result<Self> {
        let n = c.len();
        let dims = [
            (h.nrows(), "cost matrix rows"),
            (h.ncols(), "cost matrix columns"),
            (a.ncols(), "constraint matrix columns"),
            (layout.len(), "variable layout"),
        ];
        for (actual, context) in dims {
            if actual != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual,
                    context,
                });
            }
        }
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                actual: b.len(),
                context: "constraint bounds",
            });
        }
        if (&h - h.transpose()).amax() > 1e-12 * h.amax().max(1.0) {
            return Err(Error::NotConvex);
        }
        let finite = h.iter().chain(c.iter()).chain(a.iter()).chain(b.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::IllConditioned(f64::INFINITY));
        }
        Ok(Self { h, c, a, b, layout })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn p(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.c.dot(z)
    }

    /// Copy without constraint `i`.
    pub fn without_constraint(&self, i: usize) -> Self {
        Self {
            a: self.a.clone().remove_row(i),
            b: self.b.clone().remove_row(i),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Cap on primal and dual steps; 0 selects `10 (n + p) + 100`.
    pub max_iter: usize,
    pub activity_tol: f64,
    pub feasibility_tol: f64,
    pub regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 0,
            activity_tol: 1e-8,
            feasibility_tol: 1e-10,
            regularization: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vector,
    pub lambda: Vector,
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub objective: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn require_optimal(self) -> Result<Self> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            QpStatus::Infeasible => Err(Error::Infeasible),
            QpStatus::MaxIter => Err(Error::MaxIterations(self.iterations)),
        }
    }
}

pub fn kkt_residual(problem: &QpProblem, z: &Vector, lambda: &Vector) -> KktResiduals {
    let grad = &problem.h * z + &problem.c - problem.a.transpose() * lambda;
    let slack = &problem.a * z - &problem.b;
    let primal = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
    let dual = lambda.iter().fold(0.0f64, |m, &l| m.max(-l));
    let complementarity = slack
        .iter()
        .zip(lambda.iter())
        .fold(0.0f64, |m, (s, l)| m.max((s * l).abs()));
    // `+ 0.0` normalizes negative zero
    KktResiduals {
        stationarity: grad.amax(),
        primal: primal + 0.0,
        dual: dual + 0.0,
        complementarity,
    }
}

/// `J` with `J Jᵀ = H⁻¹`, from the Cholesky factor of `H`.
fn inverse_factor(h: &Matrix, reg: f64) -> Result<Matrix> {
    let n = h.nrows();
    let chol = h.clone().cholesky().or_else(|| (h + Matrix::identity(n, n) * reg).cholesky());
    let l = chol.ok_or(Error::NotConvex)?.unpack();
    let l_inv = l
        .solve_lower_triangular(&Matrix::identity(n, n))
        .ok_or(Error::NotConvex)?;
    Ok(l_inv.transpose())
}

struct ActiveSet {
    idx: Vec<usize>,
    mult: Vec<f64>,
}

/// Primal step `z = J Q₂Q₂ᵀ Jᵀ a` and dual step `r = R⁻¹ Q₁ᵀ Jᵀ a` for the
/// active normals, recomputed from a fresh QR of `Jᵀ N`.
fn step_directions(j: &Matrix, a: &Matrix, active: &[usize], ap: usize) -> (Vector, Vector) {
    let d = j.transpose() * a.row(ap).transpose();
    if active.is_empty() {
        return (j * &d, Vector::zeros(0));
    }
    let n = j.nrows();
    let mut nmat = Matrix::zeros(n, active.len());
    for (col, &i) in active.iter().enumerate() {
        nmat.set_column(col, &a.row(i).transpose());
    }
    let qr = (j.transpose() * nmat).qr();
    let q1 = qr.q();
    let r = qr.r();
    let proj = q1.transpose() * &d;
    let z = j * (&d - &q1 * &proj);
    let r_step = r
        .solve_upper_triangular(&proj)
        .unwrap_or_else(|| Vector::from_element(active.len(), f64::NAN));
    (z, r_step)
}

pub fn solve_qp(problem: &QpProblem, config: &SolverConfig) -> Result<QpSolution> {
    let n = problem.n();
    let p = problem.p();
    let j = inverse_factor(&problem.h, config.regularization)?;
    let max_iter = if config.max_iter == 0 { 10 * (n + p) + 100 } else { config.max_iter };

    let mut x = -(&j * (j.transpose() * &problem.c));
    let mut act = ActiveSet {
        idx: Vec::new(),
        mult: Vec::new(),
    };
    let mut iterations = 0;
    let scale: Vec<f64> = (0..p).map(|i| problem.a.row(i).amax().max(problem.b[i].abs()).max(1.0)).collect();

    let status = 'outer: loop {
        // most violated inactive constraint, lowest index on ties
        let slack = &problem.a * &x - &problem.b;
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..p {
            if act.idx.contains(&i) {
                continue;
            }
            let s = slack[i] / scale[i];
            if s < -config.feasibility_tol && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((ap, _)) = pick else {
            break QpStatus::Optimal;
        };
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                break 'outer QpStatus::MaxIter;
            }
            let (z, r) = step_directions(&j, &problem.a, &act.idx, ap);
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, (&rk, &uk)) in r.iter().zip(&act.mult).enumerate() {
                if rk > 1e-14 {
                    let ratio = uk / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let a_row = problem.a.row(ap).transpose();
            let za = z.dot(&a_row);
            let t2 = if z.amax() > 1e-12 * a_row.amax().max(1.0) && za > 0.0 {
                (problem.b[ap] - a_row.dot(&x)) / za
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x += t * &z;
            }
            for (m, rk) in act.mult.iter_mut().zip(r.iter()) {
                *m -= t * rk;
            }
            u_plus += t;
            if t2 <= t1 {
                act.idx.push(ap);
                act.mult.push(u_plus);
                break;
            }
            let k = drop.expect("finite partial step has a blocking index");
            act.idx.remove(k);
            act.mult.remove(k);
        }
    };

    let mut lambda = Vector::zeros(p);
    for (&i, &m) in act.idx.iter().zip(&act.mult) {
        lambda[i] = m.max(0.0);
    }
    let slack = &problem.a * &x - &problem.b;
    let active_set = (0..p).filter(|&i| slack[i] <= config.activity_tol).collect();
    let kkt = kkt_residual(problem, &x, &lambda);
    Ok(QpSolution {
        objective: problem.objective(&x),
        z: x,
        lambda,
        active_set,
        status,
        kkt,
        iterations,
    })
}

/// Closed-form minimizer of `‖q̇‖² + l‖δ‖²` subject to
/// `∂h/∂q q̇ + γ(h) ≥ δ` (paper sign for δ), valid when every task row is
/// active: `δ = (I + l GGᵀ)⁻¹ γ`, `q̇ = −l Gᵀ δ`.
pub fn analytic_unprioritized_solution(grad_h: &Matrix, gamma_h: &Vector, l: f64) -> Result<(Vector, Vector)> {
    if grad_h.nrows() != gamma_h.len() {
        return Err(Error::DimensionMismatch {
            expected: grad_h.nrows(),
            actual: gamma_h.len(),
            context: "barrier values",
        });
    }
    let m = grad_h.nrows();
    let a = Matrix::identity(m, m) + l * grad_h * grad_h.transpose();
    let delta = a.cholesky().ok_or(Error::IllConditioned(f64::INFINITY))?.solve(gamma_h);
    let qdot = -l * grad_h.transpose() * &delta;
    Ok((qdot, delta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedOracle {
    /// Multipliers of the task rows.
    pub lambda_tasks: Vector,
    /// Multipliers of the active priority rows.
    pub mu: Vector,
    pub qdot: Vector,
}

/// Closed-form solution of the fixed-stack QP when every task row and the
/// priority rows `k_active` are active. Solves
/// `[Ā₀ K̄ᵀ; K̄ K̄K̄ᵀ] [λ; −μ] = [−2lγ; 0]` with `Ā₀ = I + l GGᵀ`.
pub fn prioritized_kkt_oracle(
    grad_h_active: &Matrix,
    gamma_active: &Vector,
    k_active: &Matrix,
    l: f64,
) -> Result<PrioritizedOracle> {
    let m = grad_h_active.nrows();
    if gamma_active.len() != m || (k_active.nrows() > 0 && k_active.ncols() != m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: if gamma_active.len() != m { gamma_active.len() } else { k_active.ncols() },
            context: "prioritized oracle blocks",
        });
    }
    let r = k_active.nrows();
    let a0 = Matrix::identity(m, m) + l * grad_h_active * grad_h_active.transpose();
    let mut block = Matrix::zeros(m + r, m + r);
    block.view_mut((0, 0), (m, m)).copy_from(&a0);
    if r > 0 {
        block.view_mut((0, m), (m, r)).copy_from(&k_active.transpose());
        block.view_mut((m, 0), (r, m)).copy_from(k_active);
        block.view_mut((m, m), (r, r)).copy_from(&(k_active * k_active.transpose()));
    }
    let mut rhs = Vector::zeros(m + r);
    rhs.rows_mut(0, m).copy_from(&(-2.0 * l * gamma_active));
    let sv = crate::linalg::singular_values(&block);
    if sv.last().copied().unwrap_or(1.0) <= 1e-12 * sv[0] {
        return Err(Error::RankLoss);
    }
    let sol = block.lu().solve(&rhs).ok_or(Error::RankLoss)?;
    let lambda_tasks = sol.rows(0, m).into_owned();
    let mu = -sol.rows(m, r).into_owned();
    let qdot = 0.5 * grad_h_active.transpose() * &lambda_tasks;
    Ok(PrioritizedOracle { lambda_tasks, mu, qdot })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solve(p: &QpProblem) -> QpSolution {
        solve_qp(p, &SolverConfig::default()).unwrap()
    }

    /// Enumerates every active subset, keeps KKT points that are primal and
    /// dual feasible, and returns the best objective.
    fn brute_force(p: &QpProblem) -> Option<f64> {
        let (n, m) = (p.n(), p.p());
        let mut best: Option<f64> = None;
        for mask in 0u32..(1 << m) {
            let s: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let k = s.len();
            let mut kkt = Matrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
            let mut rhs = Vector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&(-&p.c));
            for (r, &i) in s.iter().enumerate() {
                for c in 0..n {
                    kkt[(c, n + r)] = -p.a[(i, c)];
                    kkt[(n + r, c)] = p.a[(i, c)];
                }
                rhs[n + r] = p.b[i];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            if !sol.iter().all(|x| x.is_finite()) {
                continue;
            }
            let z = sol.rows(0, n).into_owned();
            let feasible = (&p.a * &z - &p.b).iter().all(|&r| r >= -1e-9);
            let dual_ok = sol.rows(n, k).iter().all(|&l| l >= -1e-9);
            if feasible && dual_ok {
                let f = p.objective(&z);
                best = Some(best.map_or(f, |b: f64| b.min(f)));
            }
        }
        best
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
        let r = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &r * r.transpose() + Matrix::identity(n, n) * 0.5;
        let c = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        QpProblem::new(h, c, a, b).unwrap()
    }

    #[test]
    fn one_dimensional_bound() {
        let p = QpProblem::new(
            Matrix::from_element(1, 1, 2.0),
            Vector::zeros(1),
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, 1.0),
        )
        .unwrap();
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-12);
        assert!((s.lambda[0] - 2.0).abs() < 1e-12);
        assert_eq!(s.active_set, vec![0]);
        assert!(s.kkt.max() <= 1e-12);
    }

    #[test]
    fn unconstrained() {
        let p = QpProblem::new(Matrix::from_element(1, 1, 2.0), Vector::zeros(1), Matrix::zeros(0, 1), Vector::zeros(0))
            .unwrap();
        let s = solve(&p);
        assert_eq!(s.z[0], 0.0);
        assert!(s.active_set.is_empty());
    }

    #[test]
    fn infeasible_detected() {
        // z ≥ 1 and −z ≥ 0
        let p = QpProblem::new(
            Matrix::from_element(1, 1, 2.0),
            Vector::zeros(1),
            Matrix::from_column_slice(2, 1, &[1.0, -1.0]),
            Vector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(matches!(s.require_optimal(), Err(Error::Infeasible)));
    }

    #[test]
    fn iteration_cap_reported() {
        // two independent bounds need two steps
        let p = QpProblem::new(
            Matrix::identity(2, 2) * 2.0,
            Vector::zeros(2),
            Matrix::identity(2, 2),
            Vector::from_element(2, 1.0),
        )
        .unwrap();
        let cfg = SolverConfig {
            max_iter: 1,
            ..Default::default()
        };
        let s = solve_qp(&p, &cfg).unwrap();
        assert_eq!(s.status, QpStatus::MaxIter);
        assert!(matches!(s.require_optimal(), Err(Error::MaxIterations(_))));
    }

    #[test]
    fn rejects_bad_dimensions_and_asymmetry() {
        assert!(QpProblem::new(Matrix::identity(2, 2), Vector::zeros(3), Matrix::zeros(0, 3), Vector::zeros(0)).is_err());
        let h = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            QpProblem::new(h, Vector::zeros(2), Matrix::zeros(0, 2), Vector::zeros(0)),
            Err(Error::NotConvex)
        ));
    }

    #[test]
    fn matches_active_subset_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..300 {
            let p = random_problem(&mut rng, 4, 6);
            let Some(best) = brute_force(&p) else { continue };
            let s = solve(&p);
            assert_eq!(s.status, QpStatus::Optimal);
            assert!((s.objective - best).abs() < 1e-6 * best.abs().max(1.0), "{} vs {}", s.objective, best);
            assert!(s.kkt.max() < 1e-8 * s.lambda.amax().max(1.0), "{:?}", s.kkt);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_problem(&mut rng, 5, 8);
        let a = solve(&p);
        let b = solve(&p);
        assert_eq!(a.z, b.z);
        assert_eq!(a.lambda, b.lambda);
    }

    #[test]
    fn degenerate_duplicate_constraints() {
        // the same half-plane three times
        let a = Matrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        let b = Vector::from_vec(vec![1.0, 1.0, 2.0]);
        let p = QpProblem::new(Matrix::identity(2, 2) * 2.0, Vector::zeros(2), a, b).unwrap();
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 0.5).abs() < 1e-12 && (s.z[1] - 0.5).abs() < 1e-12);
        assert!(s.kkt.max() < 1e-10);
    }

    #[test]
    fn kkt_residual_examples() {
        let p = QpProblem::new(
            Matrix::from_element(1, 1, 2.0),
            Vector::zeros(1),
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, 1.0),
        )
        .unwrap();
        let exact = kkt_residual(&p, &Vector::from_element(1, 1.0), &Vector::from_element(1, 2.0));
        assert!(exact.max() <= 1e-12);
        let perturbed = kkt_residual(&p, &Vector::from_element(1, 1.0 + 1e-3), &Vector::from_element(1, 2.0));
        assert!(perturbed.stationarity > 1e-4);
        let violated = kkt_residual(&p, &Vector::from_element(1, 0.25), &Vector::zeros(1));
        assert!((violated.primal - 0.75).abs() < 1e-15);
    }

    fn unprioritized_qp(g: &Matrix, gamma: &Vector, l: f64) -> QpProblem {
        let (m, n) = g.shape();
        let mut h = Matrix::identity(n + m, n + m) * 2.0;
        for i in n..n + m {
            h[(i, i)] = 2.0 * l;
        }
        let mut a = Matrix::zeros(m, n + m);
        a.view_mut((0, 0), (m, n)).copy_from(g);
        a.view_mut((0, n), (m, m)).copy_from(&Matrix::identity(m, m));
        QpProblem::new(h, Vector::zeros(n + m), a, -gamma).unwrap()
    }

    #[test]
    fn unprioritized_oracle_examples() {
        let g = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let gamma = Vector::from_element(1, -0.5);
        let (qdot, delta) = analytic_unprioritized_solution(&g, &gamma, 1.0).unwrap();
        assert!((delta[0] + 0.25).abs() < 1e-15);
        assert!((&qdot - Vector::from_vec(vec![0.25, 0.0, 0.0])).amax() < 1e-15);
        let s = solve(&unprioritized_qp(&g, &gamma, 1.0));
        assert!((s.z.rows(0, 3) - &qdot).amax() < 1e-12);

        let (qdot, delta) = analytic_unprioritized_solution(&g, &Vector::zeros(1), 1.0).unwrap();
        assert_eq!(qdot, Vector::zeros(3));
        assert_eq!(delta, Vector::zeros(1));

        let g2 = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let gamma = Vector::from_vec(vec![-0.3, -0.8]);
        let (_, delta) = analytic_unprioritized_solution(&g2, &gamma, 1.0).unwrap();
        assert!((delta - &gamma / 2.0).amax() < 1e-15);
    }

    /// K rows for a chain stack with safety-free tasks.
    fn chain_k(m: usize, kappa: f64) -> Matrix {
        let mut k = Matrix::zeros(m - 1, m);
        for r in 0..m - 1 {
            k[(r, r)] = 1.0;
            k[(r, r + 1)] = -1.0 / kappa;
        }
        k
    }

    #[test]
    fn prioritized_oracle_matches_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (n, m, l, kappa) = (4, 3, 10.0, 5.0);
        let mut compared = 0;
        for _ in 0..400 {
            let g = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let gamma = Vector::from_fn(m, |_, _| rng.random_range(-1.0..-0.1));
            let k = chain_k(m, kappa);
            // z = [u; δ] with δ ≥ 0 in the QP sign; priority rows −Kδ ≥ 0
            let base = unprioritized_qp(&g, &gamma, l);
            let mut a = Matrix::zeros(2 * m - 1, n + m);
            a.view_mut((0, 0), (m, n + m)).copy_from(&base.a);
            a.view_mut((m, n), (m - 1, m)).copy_from(&(-&k));
            let mut b = Vector::zeros(2 * m - 1);
            b.rows_mut(0, m).copy_from(&base.b);
            let p = QpProblem::new(base.h.clone(), base.c.clone(), a, b).unwrap();
            let s = solve(&p);
            let tasks_active = (0..m).all(|i| s.active_set.contains(&i));
            if !tasks_active {
                continue;
            }
            let rows: Vec<usize> = (0..m - 1).filter(|r| s.active_set.contains(&(m + r))).collect();
            let k_act = Matrix::from_fn(rows.len(), m, |r, c| k[(rows[r], c)]);
            let oracle = prioritized_kkt_oracle(&g, &gamma, &k_act, l).unwrap();
            if oracle.mu.iter().any(|&x| x < -1e-9) || oracle.lambda_tasks.iter().any(|&x| x < -1e-9) {
                continue;
            }
            assert!((s.z.rows(0, n) - &oracle.qdot).amax() < 1e-5);
            compared += 1;
        }
        assert!(compared > 50, "{compared}");
    }

    #[test]
    fn prioritized_oracle_degenerate_and_linear() {
        let g = Matrix::from_row_slice(2, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, -0.4]);
        let gamma = Vector::from_vec(vec![-0.4, -0.9]);
        let empty = prioritized_kkt_oracle(&g, &gamma, &Matrix::zeros(0, 2), 3.0).unwrap();
        let (qdot, _) = analytic_unprioritized_solution(&g, &gamma, 3.0).unwrap();
        assert!((empty.qdot - qdot).amax() < 1e-12);

        let k = chain_k(2, 10.0);
        let one = prioritized_kkt_oracle(&g, &gamma, &k, 3.0).unwrap();
        let two = prioritized_kkt_oracle(&g, &(2.5 * &gamma), &k, 3.0).unwrap();
        assert!((two.lambda_tasks - 2.5 * one.lambda_tasks).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn removing_a_constraint_never_raises_cost(seed in 0u64..10_000, drop in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 3, 5);
            let full = solve(&p);
            prop_assume!(full.status == QpStatus::Optimal);
            let relaxed = solve(&p.without_constraint(drop));
            prop_assert_eq!(relaxed.status, QpStatus::Optimal);
            prop_assert!(relaxed.objective <= full.objective + 1e-9);
        }

        #[test]
        fn multipliers_nonnegative_and_complementary(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 5, 8);
            let s = solve(&p);
            prop_assume!(s.status == QpStatus::Optimal);
            prop_assert!(s.lambda.iter().all(|&l| l >= -1e-9));
            let scale = s.lambda.amax().max(1.0);
            prop_assert!(s.kkt.complementarity < 1e-8 * scale);
            prop_assert!(s.kkt.stationarity < 1e-8 * scale);
        }
    }
}
