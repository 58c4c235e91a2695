#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use zipmpc::solver::{CostSchedule, LtiSystem, MpcProblem};

/// Finite-horizon LQR with affine stage terms, solved by the textbook
/// backward Riccati recursion and a forward rollout.
///
/// Cost `sum_i z_i' diag(q_i) z_i + p_i' z_i` over `z_i = [x_i, u_i]`,
/// `i = 0..=N`, dynamics `x' = A x + B u`, nothing on `x_{N+1}`.
pub fn riccati_solution(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &CostSchedule,
    x0: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let (n, m) = (a.nrows(), b.ncols());
    let stages = cost.stages();
    // value function V(x) = x' P x + s' x
    let mut p_mat = DMatrix::<f64>::zeros(n, n);
    let mut s_vec = DVector::<f64>::zeros(n);
    let mut gains = vec![(DMatrix::zeros(m, n), DVector::zeros(m)); stages];
    for i in (0..stages).rev() {
        let qx = DMatrix::from_diagonal(&cost.q[i].rows(0, n).into_owned());
        let ru = DMatrix::from_diagonal(&cost.q[i].rows(n, m).into_owned());
        let px = cost.p[i].rows(0, n).into_owned();
        let pu = cost.p[i].rows(n, m).into_owned();
        let quu = &ru + b.transpose() * &p_mat * b;
        let qux = b.transpose() * &p_mat * a;
        let qxx = &qx + a.transpose() * &p_mat * a;
        let lu = &pu + b.transpose() * &s_vec;
        let lx = &px + a.transpose() * &s_vec;
        let inv = quu.clone().try_inverse().expect("Quu singular");
        let k_mat = -&inv * &qux;
        let k_vec = -&inv * &lu * 0.5;
        p_mat = &qxx + qux.transpose() * &k_mat;
        p_mat = (&p_mat + p_mat.transpose()) * 0.5;
        s_vec = &lx + k_mat.transpose() * &lu;
        gains[i] = (k_mat, k_vec);
    }
    let mut xs = vec![x0.clone()];
    let mut us = Vec::with_capacity(stages);
    for (k_mat, k_vec) in &gains {
        let x = xs.last().unwrap();
        let u = k_mat * x + k_vec;
        xs.push(a * x + b * &u);
        us.push(u);
    }
    (xs, us)
}

/// A random stabilizable LTI problem with a strictly convex diagonal cost
/// and no input bounds.
pub fn random_lti(rng: &mut impl Rng, n: usize, m: usize, horizon: usize) -> (MpcProblem<LtiSystem>, DVector<f64>) {
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.9 } else { 0.0 } + rng.gen_range(-0.25..0.25));
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
    let stages = horizon + 1;
    let q = (0..stages).map(|_| DVector::from_fn(n + m, |_, _| rng.gen_range(0.1..2.0))).collect();
    let p = (0..stages).map(|_| DVector::from_fn(n + m, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let cost = CostSchedule { q, p };
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let lo = DVector::from_element(m, f64::NEG_INFINITY);
    let hi = DVector::from_element(m, f64::INFINITY);
    (MpcProblem::new(LtiSystem::new(a, b), cost, lo, hi), x0)
}

/// Largest absolute difference between two trajectories.
pub fn max_deviation(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}
