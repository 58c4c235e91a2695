//! iLQR with box-constrained inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::boxqp::{solve_box_qp, BoundState};
use super::cost::{build_stage_cost, stage_value, CostSchedule, Penalty};
use super::System;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once an accepted step lowers the objective by less than this (0 disables).
    pub tol_obj: f64,
    /// Stop once the largest feed-forward correction is below this.
    pub tol_step: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_factor: f64,
    /// Line search tries `1, 1/2, ..., 2^-(line_search_steps - 1)`.
    pub line_search_steps: usize,
    /// Inputs this close to a bound count as active.
    pub active_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_obj: 1e-7,
            tol_step: 1e-9,
            reg_init: 0.0,
            reg_min: 1e-8,
            reg_max: 1e8,
            reg_factor: 10.0,
            line_search_steps: 11,
            active_tol: 1e-9,
        }
    }
}

impl SolverOptions {
    /// Settings for reference solves inside finite-difference checks.
    pub fn tight() -> Self {
        Self { max_iter: 500, tol_obj: 0.0, tol_step: 1e-12, ..Self::default() }
    }
}

/// A finite-horizon optimal control problem over stages `0..=horizon`.
#[derive(Debug, Clone)]
pub struct MpcProblem<S> {
    pub system: S,
    pub horizon: usize,
    pub cost: CostSchedule,
    pub penalty: Penalty,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub options: SolverOptions,
}

impl<S: System> MpcProblem<S> {
    pub fn new(system: S, cost: CostSchedule, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let horizon = cost.horizon();
        Self { system, horizon, cost, penalty: Penalty::none(), lower, upper, options: SolverOptions::default() }
    }

    pub fn with_penalty(mut self, penalty: Penalty) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    /// Same problem with another cost schedule (the horizon follows the schedule).
    pub fn with_cost(&self, cost: CostSchedule) -> Self
    where
        S: Clone,
    {
        let mut p = self.clone();
        p.horizon = cost.horizon();
        p.cost = cost;
        p
    }

    fn check(&self) -> Result<()> {
        let (n, m) = (self.system.state_dim(), self.system.input_dim());
        if self.horizon == 0 && self.cost.stages() != 1 {
            return Err(Error::Dimension("horizon does not match the cost schedule".into()));
        }
        if self.cost.stages() != self.horizon + 1 {
            return Err(Error::Dimension(format!(
                "cost has {} stages for horizon {}",
                self.cost.stages(),
                self.horizon
            )));
        }
        if self.cost.dim() != n + m {
            return Err(Error::Dimension(format!("cost dim {} != n + m = {}", self.cost.dim(), n + m)));
        }
        if self.lower.len() != m || self.upper.len() != m {
            return Err(Error::Dimension("input bounds length".into()));
        }
        Ok(())
    }

    pub fn clamp_input(&self, u: &mut DVector<f64>) {
        for j in 0..u.len() {
            u[j] = u[j].clamp(self.lower[j], self.upper[j]);
        }
    }

    pub fn rollout(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(x0.clone());
        for u in inputs {
            let next = self.system.step(xs.last().unwrap(), u)?;
            xs.push(next);
        }
        Ok(xs)
    }

    pub fn objective(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let mut z = vec![0.0; self.cost.dim()];
        let n = self.system.state_dim();
        let mut total = 0.0;
        for i in 0..=self.horizon {
            z[..n].copy_from_slice(xs[i].as_slice());
            z[n..].copy_from_slice(us[i].as_slice());
            total += stage_value(&self.cost, &self.penalty, i, &z);
        }
        total
    }

    /// Largest soft-bound violation over stages `1..=N+1`.
    pub fn max_violation(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let n = self.system.state_dim();
        let mut z = vec![0.0; self.cost.dim()];
        let mut worst: f64 = 0.0;
        for i in 1..xs.len() {
            z[..n].copy_from_slice(xs[i].as_slice());
            if i < us.len() {
                z[n..].copy_from_slice(us[i].as_slice());
            }
            worst = worst.max(self.penalty.max_violation(&z));
        }
        worst
    }
}

/// Optimal trajectories plus the solver state at the returned iterate.
#[derive(Debug, Clone)]
pub struct SolveRecord {
    /// `x_0 ..= x_{N+1}`
    pub states: Vec<DVector<f64>>,
    /// `u_0 ..= u_N`
    pub inputs: Vec<DVector<f64>>,
    /// Dynamics Jacobians `(A_i, B_i)` at the returned trajectory.
    pub jacobians: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// Feedback gains from the last backward pass.
    pub gains: Vec<DMatrix<f64>>,
    /// Per stage, which inputs sit on a bound.
    pub active: Vec<Vec<bool>>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
}

impl SolveRecord {
    pub fn horizon(&self) -> usize {
        self.inputs.len() - 1
    }

    /// Stage vector `z_i = [x_i, u_i]`; for `i = N+1` the input part is zero.
    pub fn stage_vector(&self, i: usize) -> DVector<f64> {
        let n = self.states[0].len();
        let m = self.inputs[0].len();
        let mut z = DVector::zeros(n + m);
        z.rows_mut(0, n).copy_from(&self.states[i]);
        if i < self.inputs.len() {
            z.rows_mut(n, m).copy_from(&self.inputs[i]);
        }
        z
    }
}

struct BackwardPass {
    k: Vec<DVector<f64>>,
    gains: Vec<DMatrix<f64>>,
    expected: f64,
    max_step: f64,
}

fn backward_pass<S: System>(
    prob: &MpcProblem<S>,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    lin: &[(DMatrix<f64>, DMatrix<f64>)],
    reg: f64,
) -> Option<BackwardPass> {
    let n = prob.system.state_dim();
    let m = prob.system.input_dim();
    let big_n = prob.horizon;
    let mut vx = DVector::zeros(n);
    let mut vxx = DMatrix::zeros(n, n);
    let mut ks = vec![DVector::zeros(m); big_n + 1];
    let mut gains = vec![DMatrix::zeros(m, n); big_n + 1];
    let mut expected = 0.0;
    let mut max_step: f64 = 0.0;
    let mut z = vec![0.0; n + m];
    for i in (0..=big_n).rev() {
        let (a, b) = &lin[i];
        z[..n].copy_from_slice(xs[i].as_slice());
        z[n..].copy_from_slice(us[i].as_slice());
        let d = build_stage_cost(&prob.cost, &prob.penalty, i, &z);
        let qx = d.grad.rows(0, n) + a.transpose() * &vx;
        let qu = d.grad.rows(n, m) + b.transpose() * &vx;
        let vxx_a = &vxx * a;
        let mut qxx = a.transpose() * &vxx_a;
        let mut quu = b.transpose() * &vxx * b;
        let qux = b.transpose() * &vxx_a;
        for j in 0..n {
            qxx[(j, j)] += d.hess[j];
        }
        for j in 0..m {
            quu[(j, j)] += d.hess[n + j];
        }
        let quu = (&quu + quu.transpose()) * 0.5;
        let mut quu_reg = quu.clone();
        for j in 0..m {
            quu_reg[(j, j)] += reg;
        }
        let lo = &prob.lower - &us[i];
        let hi = &prob.upper - &us[i];
        let sol = solve_box_qp(&quu_reg, &qu, &lo, &hi)?;
        let k = sol.x.clone();
        let mut gain = DMatrix::zeros(m, n);
        let free = sol.free_indices();
        if !free.is_empty() {
            let qux_f = DMatrix::from_fn(free.len(), n, |a, c| qux[(free[a], c)]);
            let kf = -(&sol.free_inv * qux_f);
            for (a, &r) in free.iter().enumerate() {
                gain.set_row(r, &kf.row(a));
            }
        }
        debug_assert!(sol.state.iter().zip(k.iter()).all(|(s, v)| *s == BoundState::Free || v.is_finite()));
        expected += k.dot(&qu) + 0.5 * k.dot(&(&quu * &k));
        max_step = max_step.max(k.amax());
        let kt_quu = gain.transpose() * &quu;
        vx = &qx + &kt_quu * &k + gain.transpose() * &qu + qux.transpose() * &k;
        let new_vxx = &qxx + &kt_quu * &gain + gain.transpose() * &qux + qux.transpose() * &gain;
        vxx = (&new_vxx + new_vxx.transpose()) * 0.5;
        ks[i] = k;
        gains[i] = gain;
    }
    Some(BackwardPass { k: ks, gains, expected, max_step })
}

fn forward_pass<S: System>(
    prob: &MpcProblem<S>,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    bp: &BackwardPass,
    alpha: f64,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let mut new_x = Vec::with_capacity(xs.len());
    let mut new_u = Vec::with_capacity(us.len());
    new_x.push(xs[0].clone());
    for i in 0..us.len() {
        let dx = &new_x[i] - &xs[i];
        let mut u = &us[i] + &bp.k[i] * alpha + &bp.gains[i] * dx;
        prob.clamp_input(&mut u);
        let next = prob.system.step(&new_x[i], &u)?;
        new_u.push(u);
        new_x.push(next);
    }
    Ok((new_x, new_u))
}

fn linearize_all<S: System>(
    prob: &MpcProblem<S>,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    us.iter()
        .enumerate()
        .map(|(i, u)| prob.system.jacobians(&xs[i], u).map_err(|e| Error::Linearization(e.to_string())))
        .collect()
}

/// Solves the problem from `x0`, optionally warm-started with an input sequence.
pub fn solve<S: System>(
    prob: &MpcProblem<S>,
    x0: &DVector<f64>,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<SolveRecord> {
    prob.check()?;
    let m = prob.system.input_dim();
    let opts = &prob.options;
    let stages = prob.horizon + 1;
    let mut us: Vec<DVector<f64>> = match warm_start {
        Some(w) => (0..stages).map(|i| w.get(i).or(w.last()).cloned().unwrap_or_else(|| DVector::zeros(m))).collect(),
        None => vec![DVector::zeros(m); stages],
    };
    for u in us.iter_mut() {
        prob.clamp_input(u);
    }
    let mut xs = match prob.rollout(x0, &us) {
        Ok(xs) => xs,
        Err(e) if warm_start.is_some() => {
            us = vec![DVector::zeros(m); stages];
            for u in us.iter_mut() {
                prob.clamp_input(u);
            }
            prob.rollout(x0, &us).map_err(|_| Error::Infeasible(format!("initial rollout failed: {e}")))?
        }
        Err(e) => return Err(Error::Infeasible(format!("initial rollout failed: {e}"))),
    };
    let mut objective = prob.objective(&xs, &us);
    let mut reg = opts.reg_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut lin = linearize_all(prob, &xs, &us)?;
    let mut lin_current = true;
    let mut gains = vec![DMatrix::zeros(m, prob.system.state_dim()); stages];

    while iterations < opts.max_iter {
        iterations += 1;
        if !lin_current {
            lin = linearize_all(prob, &xs, &us)?;
            lin_current = true;
        }
        let bp = match backward_pass(prob, &xs, &us, &lin, reg) {
            Some(bp) => bp,
            None => {
                reg = (reg * opts.reg_factor).max(opts.reg_min);
                if reg > opts.reg_max {
                    break;
                }
                continue;
            }
        };
        gains.clone_from(&bp.gains);
        if bp.max_step < opts.tol_step {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        // Near the optimum the predicted decrease drops below the rounding
        // error of the objective; full steps are then accepted unless they
        // visibly increase it, so the step tolerance can still be reached.
        let noise = 1e-13 * (1.0 + objective.abs());
        let below_noise = bp.expected.abs() <= noise;
        for _ in 0..opts.line_search_steps {
            if let Ok((nx, nu)) = forward_pass(prob, &xs, &us, &bp, alpha) {
                let j = prob.objective(&nx, &nu);
                if j < objective || (below_noise && j <= objective + noise) {
                    accepted = Some((nx, nu, j));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((nx, nu, j)) => {
                let decrease = objective - j;
                xs = nx;
                us = nu;
                objective = j;
                lin_current = false;
                reg = if reg / opts.reg_factor < opts.reg_min { 0.0 } else { reg / opts.reg_factor };
                if opts.tol_obj > 0.0 && decrease < opts.tol_obj {
                    converged = true;
                    break;
                }
            }
            None => {
                // no decrease possible at machine precision
                if bp.expected.abs() <= 1e-12 * (1.0 + objective.abs()) {
                    converged = true;
                    break;
                }
                reg = (reg * opts.reg_factor).max(opts.reg_min);
                if reg > opts.reg_max {
                    break;
                }
            }
        }
    }
    if !lin_current {
        lin = linearize_all(prob, &xs, &us)?;
    }
    let active = us
        .iter()
        .map(|u| {
            (0..m)
                .map(|j| u[j] - prob.lower[j] <= opts.active_tol || prob.upper[j] - u[j] <= opts.active_tol)
                .collect()
        })
        .collect();
    let max_violation = prob.max_violation(&xs, &us);
    Ok(SolveRecord { states: xs, inputs: us, jacobians: lin, gains, active, converged, iterations, objective, max_violation })
}
