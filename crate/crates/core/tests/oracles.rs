//! Controller outputs against closed forms derived here, independently of
//! the library's own oracles.

use std::f64::consts::PI;

use esb_core::manipulator::{LinkChain, Robot, Selector};
use esb_core::priority::{assemble_fixed_stack_qp, solve_kinematic, StackMode, StackSpec, Weights};
use esb_core::qp::SolverConfig;
use esb_core::tasks::{goal_point_task, ClassK, EsbTask, Trajectory};
use esb_core::{Matrix, Vector};
use proptest::prelude::*;

fn goals(targets: &[(usize, [f64; 2])]) -> Vec<EsbTask> {
    targets
        .iter()
        .enumerate()
        .map(|(i, (link, t))| {
            goal_point_task(format!("t{i}"), Selector::LinkEnd(*link), Trajectory::constant(t.to_vec()), ClassK::linear(1.5))
        })
        .collect()
}

/// With every task row active, `min ‖u‖² + l‖δ‖²` s.t. `Gu + δ = −γ` gives
/// multipliers `λ = −2(GGᵀ + I/l)⁻¹γ` and `u = Gᵀλ/2`; the solution is the
/// QP optimum when `λ ≥ 0`.
fn equality_solution(g: &Matrix, gamma: &Vector, l: f64) -> (Vector, Vector) {
    let m = g.nrows();
    let a = g * g.transpose() + Matrix::identity(m, m) / l;
    let lambda = -2.0 * a.lu().solve(gamma).unwrap();
    (g.transpose() * &lambda / 2.0, lambda)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn unprioritized_qp_matches_equality_kkt(
        q in proptest::collection::vec(-PI..PI, 4),
        a in proptest::collection::vec(-1.5f64..1.5, 6),
        l in 1.0f64..500.0,
    ) {
        let robot = Robot::Planar(LinkChain::planar(vec![0.4, 0.5, 0.3, 0.4]).unwrap());
        let tasks = goals(&[(4, [a[0], a[1]]), (2, [a[2], a[3]]), (3, [a[4], a[5]])]);
        let stack = StackSpec { order: vec![vec!["t0".into(), "t1".into(), "t2".into()]], kappa: 1e3, mode: StackMode::Fixed };
        let w = Weights { l_delta: l, ..Weights::default() };
        let q = Vector::from_vec(q);
        let qp = assemble_fixed_stack_qp(&tasks, &robot, &q, 0.0, &stack, &w).unwrap();
        let g = qp.grad.clone();
        let gamma = Vector::from_vec(qp.gamma_h.clone());
        let out = solve_kinematic(qp, &SolverConfig::default()).unwrap();
        let (u, lambda) = equality_solution(&g, &gamma, l);
        prop_assume!(lambda.iter().all(|&x| x > 1e-9));
        prop_assert!((out.u - u).amax() < 1e-7);
    }

    #[test]
    fn fixed_stack_slacks_are_ordered(
        q in proptest::collection::vec(-PI..PI, 3),
    ) {
        let robot = Robot::Planar(LinkChain::planar(vec![0.5; 3]).unwrap());
        let tasks = goals(&[(3, [0.5, 1.0]), (3, [-0.2, -1.2]), (3, [-0.25, 0.0])]);
        let stack = StackSpec::chain(&["t0", "t1", "t2"], 1e3, StackMode::Fixed);
        let q = Vector::from_vec(q);
        let qp = assemble_fixed_stack_qp(&tasks, &robot, &q, 0.0, &stack, &Weights::default()).unwrap();
        let out = solve_kinematic(qp, &SolverConfig::default()).unwrap();
        let d = &out.delta;
        prop_assert!(d[0] <= d[1] / 1e3 + 1e-9);
        prop_assert!(d[1] <= d[2] / 1e3 + 1e-9);
    }
}

#[test]
fn single_task_without_slack_need_is_the_minimum_norm_velocity() {
    // one goal, far from its target: the row is active and u is parallel to ∇h
    let robot = Robot::Planar(LinkChain::planar(vec![0.5; 3]).unwrap());
    let tasks = goals(&[(3, [0.3, 0.9])]);
    let stack = StackSpec::chain(&["t0"], 1e3, StackMode::Fixed);
    let q = Vector::from_vec(vec![0.2, -0.4, 0.7]);
    let qp = assemble_fixed_stack_qp(&tasks, &robot, &q, 0.0, &stack, &Weights::default()).unwrap();
    let g = qp.grad.row(0).transpose();
    let out = solve_kinematic(qp, &SolverConfig::default()).unwrap();
    let cos = out.u.dot(&g) / (out.u.norm() * g.norm());
    assert!((cos - 1.0).abs() < 1e-9, "{cos}");
}
