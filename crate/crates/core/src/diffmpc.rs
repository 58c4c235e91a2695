//! Sensitivities of a converged MPC solution with respect to its cost weights.
//!
//! At a converged iterate the KKT conditions of the (input-clamped) problem
//! hold. Differentiating them gives a linear system whose matrix is the KKT
//! matrix of an equality-constrained LQR built from the Lagrangian Hessian.
//! Solving that LQR with the upstream gradient as its linear term yields the
//! adjoint `d`, and for every stage `i` and entry `j`
//!
//! ```text
//! dL/dp_ij = d_ij        dL/dq_ij = 2 z*_ij d_ij
//! ```
//!
//! Inputs sitting on a bound are held fixed, so no gradient flows through them.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::cost::build_stage_cost;
use crate::solver::{solve, CostSchedule, MpcProblem, SolveRecord, SolverOptions, System};

/// Gradient of a scalar loss with respect to a [`CostSchedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostGradient {
    pub dq: Vec<DVector<f64>>,
    pub dp: Vec<DVector<f64>>,
}

impl CostGradient {
    pub fn zeros(stages: usize, dim: usize) -> Self {
        Self { dq: vec![DVector::zeros(dim); stages], dp: vec![DVector::zeros(dim); stages] }
    }

    pub fn max_abs(&self) -> f64 {
        self.dq.iter().chain(&self.dp).map(|v| v.amax()).fold(0.0, f64::max)
    }

    pub fn as_schedule(&self) -> CostSchedule {
        CostSchedule { q: self.dq.clone(), p: self.dp.clone() }
    }
}

/// Gradient of a scalar loss with respect to the solver's trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGradient {
    /// One entry per state `x_0 ..= x_{N+1}`; the entry for `x_0` is ignored.
    pub states: Vec<DVector<f64>>,
    /// One entry per input `u_0 ..= u_N`.
    pub inputs: Vec<DVector<f64>>,
}

impl TrajectoryGradient {
    pub fn zeros_like(record: &SolveRecord) -> Self {
        Self {
            states: record.states.iter().map(|x| DVector::zeros(x.len())).collect(),
            inputs: record.inputs.iter().map(|u| DVector::zeros(u.len())).collect(),
        }
    }
}

/// Which Hessian the adjoint LQR was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Curvature {
    /// Cost Hessian plus the costate-weighted dynamics Hessian.
    Lagrangian,
    /// Cost Hessian only, used when the Lagrangian one is not positive definite
    /// on the free inputs.
    GaussNewton,
}

/// Backward pass through a converged solve.
pub fn backward<S: System>(
    problem: &MpcProblem<S>,
    record: &SolveRecord,
    upstream: &TrajectoryGradient,
) -> Result<CostGradient> {
    backward_with_info(problem, record, upstream).map(|(g, _)| g)
}

/// Like [`backward`], also reporting which curvature was used.
pub fn backward_with_info<S: System>(
    problem: &MpcProblem<S>,
    record: &SolveRecord,
    upstream: &TrajectoryGradient,
) -> Result<(CostGradient, Curvature)> {
    if !record.converged {
        return Err(Error::NotConverged);
    }
    let n = problem.system.state_dim();
    let m = problem.system.input_dim();
    let stages = record.inputs.len();
    if stages != problem.cost.stages()
        || upstream.states.len() != stages + 1
        || upstream.inputs.len() != stages
        || upstream.states.iter().any(|g| g.len() != n)
        || upstream.inputs.iter().any(|g| g.len() != m)
    {
        return Err(Error::Dimension("upstream gradient does not match the solve record".into()));
    }
    if upstream.states.iter().chain(&upstream.inputs).any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient);
    }

    let zs: Vec<DVector<f64>> = (0..stages).map(|i| record.stage_vector(i)).collect();
    let derivs: Vec<_> =
        (0..stages).map(|i| build_stage_cost(&problem.cost, &problem.penalty, i, zs[i].as_slice())).collect();

    // costates: lambda_{N+1} = 0, lambda_i = grad_x l_i + A_i' lambda_{i+1}
    let mut lambda = vec![DVector::zeros(n); stages + 1];
    for i in (0..stages).rev() {
        let a = &record.jacobians[i].0;
        lambda[i] = derivs[i].grad.rows(0, n).into_owned() + a.transpose() * &lambda[i + 1];
    }

    let mut hessians = Vec::with_capacity(stages);
    for i in 0..stages {
        let mut h = DMatrix::from_diagonal(&derivs[i].hess);
        if lambda[i + 1].amax() > 0.0 {
            h += problem.system.weighted_hessian(&record.states[i], &record.inputs[i], &lambda[i + 1])?;
        }
        hessians.push(h);
    }

    let (d, curvature) = match adjoint_lqr(record, &hessians, upstream, n, m) {
        Some(d) => (d, Curvature::Lagrangian),
        None => {
            let gn: Vec<_> = derivs.iter().map(|s| DMatrix::from_diagonal(&s.hess)).collect();
            let d = adjoint_lqr(record, &gn, upstream, n, m)
                .ok_or_else(|| Error::Linearization("adjoint system is singular on the free inputs".into()))?;
            (d, Curvature::GaussNewton)
        }
    };

    let mut grad = CostGradient::zeros(stages, n + m);
    for i in 0..stages {
        for j in 0..n + m {
            grad.dp[i][j] = d[i][j];
            grad.dq[i][j] = 2.0 * zs[i][j] * d[i][j];
        }
    }
    Ok((grad, curvature))
}

/// Solves `min sum_i 0.5 dz_i' H_i dz_i + g_i' dz_i` subject to the
/// linearized dynamics, `dx_0 = 0` and zero perturbation of active inputs.
/// Returns the stage perturbations `dz_0 ..= dz_N`.
fn adjoint_lqr(
    record: &SolveRecord,
    hessians: &[DMatrix<f64>],
    g: &TrajectoryGradient,
    n: usize,
    m: usize,
) -> Option<Vec<DVector<f64>>> {
    let stages = hessians.len();
    let mut vxx = DMatrix::<f64>::zeros(n, n);
    let mut vx = g.states[stages].clone();
    let mut gains = vec![DMatrix::zeros(m, n); stages];
    let mut ffwd = vec![DVector::zeros(m); stages];
    for i in (0..stages).rev() {
        let (a, b) = &record.jacobians[i];
        let h = &hessians[i];
        let hxx = h.view((0, 0), (n, n));
        let hux = h.view((n, 0), (m, n));
        let huu = h.view((n, n), (m, m));
        let qxx = hxx + a.transpose() * &vxx * a;
        let qux = hux + b.transpose() * &vxx * a;
        let quu = huu + b.transpose() * &vxx * b;
        let qx = &g.states[i] + a.transpose() * &vx;
        let qu = &g.inputs[i] + b.transpose() * &vx;

        let free: Vec<usize> = (0..m).filter(|&j| !record.active[i][j]).collect();
        let mut k = DMatrix::zeros(m, n);
        let mut kf = DVector::zeros(m);
        if !free.is_empty() {
            let nf = free.len();
            let quu_f = DMatrix::from_fn(nf, nf, |r, c| quu[(free[r], free[c])]);
            let chol = quu_f.cholesky()?;
            let qux_f = DMatrix::from_fn(nf, n, |r, c| qux[(free[r], c)]);
            let qu_f = DVector::from_fn(nf, |r, _| qu[free[r]]);
            let kk = -chol.solve(&qux_f);
            let kv = -chol.solve(&qu_f);
            for (r, &j) in free.iter().enumerate() {
                k.set_row(j, &kk.row(r));
                kf[j] = kv[r];
            }
        }
        // value function with the optimal free-input response substituted
        vx = &qx + k.transpose() * &quu * &kf + k.transpose() * &qu + qux.transpose() * &kf;
        vxx = &qxx + k.transpose() * &quu * &k + k.transpose() * &qux + qux.transpose() * &k;
        vxx = (&vxx + vxx.transpose()) * 0.5;
        gains[i] = k;
        ffwd[i] = kf;
    }
    let mut dx = DVector::zeros(n);
    let mut out = Vec::with_capacity(stages);
    for i in 0..stages {
        let du = &gains[i] * &dx + &ffwd[i];
        let mut dz = DVector::zeros(n + m);
        dz.rows_mut(0, n).copy_from(&dx);
        dz.rows_mut(n, m).copy_from(&du);
        let (a, b) = &record.jacobians[i];
        dx = a * &dx + b * &du;
        out.push(dz);
    }
    Some(out)
}

/// Scalar losses on the solver output used for gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `sum_i ||u_i||^2`
    InputEnergy,
    /// Weighted squared error of `z_i = [x_i, u_i]` to a reference, averaged over stages.
    Tracking { reference: Vec<DVector<f64>>, weights: DVector<f64> },
}

impl LossSpec {
    pub fn evaluate(&self, record: &SolveRecord) -> Result<(f64, TrajectoryGradient)> {
        let mut grad = TrajectoryGradient::zeros_like(record);
        let mut value = 0.0;
        match self {
            LossSpec::InputEnergy => {
                for (u, g) in record.inputs.iter().zip(grad.inputs.iter_mut()) {
                    value += u.norm_squared();
                    *g = u * 2.0;
                }
            }
            LossSpec::Tracking { reference, weights } => {
                let stages = record.inputs.len();
                if reference.len() != stages {
                    return Err(Error::Dimension("reference length must equal the number of stages".into()));
                }
                let n = record.states[0].len();
                let scale = 1.0 / stages as f64;
                for (i, r) in reference.iter().enumerate() {
                    let z = record.stage_vector(i);
                    let e = &z - r;
                    value += scale * e.iter().zip(weights.iter()).map(|(e, w)| w * e * e).sum::<f64>();
                    let gz = e.component_mul(weights) * (2.0 * scale);
                    grad.states[i] = gz.rows(0, n).into_owned();
                    grad.inputs[i] = gz.rows(n, gz.len() - n).into_owned();
                }
            }
        }
        Ok((value, grad))
    }
}

/// Which half of the cost a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Q,
    P,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub stage: usize,
    pub kind: ParamKind,
    pub index: usize,
    pub analytic: f64,
    /// `None` if a perturbed solve failed.
    pub numeric: Option<f64>,
    pub rel_err: Option<f64>,
    /// A perturbed solve changed which input bounds or soft-bound penalties
    /// are active; the solution map has a kink there and the entry is left
    /// out of `max_rel_err`.
    pub switched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub curvature: Curvature,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn failed_entries(&self) -> usize {
        self.rows.iter().filter(|r| r.numeric.is_none()).count()
    }

    pub fn switched_entries(&self) -> usize {
        self.rows.iter().filter(|r| r.switched).count()
    }

    /// Columns: `stage,kind,index,analytic,numeric,rel_err,switched`; failed entries leave
    /// `numeric` and `rel_err` empty.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "stage,kind,index,analytic,numeric,rel_err,switched")?;
        for r in &self.rows {
            let kind = match r.kind {
                ParamKind::Q => "q",
                ParamKind::P => "p",
            };
            let num = r.numeric.map(|v| format!("{v:.12e}")).unwrap_or_default();
            let rel = r.rel_err.map(|v| format!("{v:.3e}")).unwrap_or_default();
            writeln!(out, "{},{},{},{:.12e},{},{},{}", r.stage, kind, r.index, r.analytic, num, rel, r.switched)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Relative error with a floor tied to the overall gradient scale, so that
/// entries whose true gradient is (numerically) zero do not dominate.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6 * scale + 1e-12);
    (analytic - numeric).abs() / denom
}

/// Compares [`backward`] against central differences that re-solve the MPC
/// for every perturbed weight. Each entry uses Ridders' extrapolation,
/// starting at step `h` and halving, so that neither curvature of the
/// solution map (large steps) nor solver rounding (small steps) dominates.
/// Steps whose perturbation changes the active set are discarded. With
/// `max_entries`, a seeded random subset of the `2 (N+1)(n+m)` weights is
/// checked.
pub fn gradcheck<S: System + Clone>(
    problem: &MpcProblem<S>,
    x0: &DVector<f64>,
    loss: &LossSpec,
    h: f64,
    seed: u64,
    max_entries: Option<usize>,
) -> Result<GradcheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let tight = problem.clone().with_options(SolverOptions::tight());
    let record = solve(&tight, x0, None)?;
    let (_, upstream) = loss.evaluate(&record)?;
    let (grad, curvature) = backward_with_info(&tight, &record, &upstream)?;

    let dim = problem.cost.dim();
    let stages = problem.cost.stages();
    let total = 2 * stages * dim;
    let mut entries: Vec<usize> = match max_entries {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, total, k).into_vec()
        }
        _ => (0..total).collect(),
    };
    entries.sort_unstable();

    let nominal = activity(&tight, &record);
    let switched = std::cell::Cell::new(false);
    let eval = |cost: CostSchedule| -> Option<f64> {
        let p = tight.with_cost(cost);
        let rec = solve(&p, x0, Some(&record.inputs)).ok()?;
        if activity(&p, &rec) != nominal {
            switched.set(true);
        }
        loss.evaluate(&rec).ok().map(|(v, _)| v)
    };

    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let stage = e / (2 * dim);
        let rem = e % (2 * dim);
        let (kind, index) = if rem < dim { (ParamKind::Q, rem) } else { (ParamKind::P, rem - dim) };
        let perturbed = |delta: f64| {
            let mut c = tight.cost.clone();
            match kind {
                ParamKind::Q => c.q[stage][index] += delta,
                ParamKind::P => c.p[stage][index] += delta,
            }
            c
        };
        // None if a solve failed; Some((difference, active set changed))
        let central = |step: f64| {
            switched.set(false);
            match (eval(perturbed(step)), eval(perturbed(-step))) {
                (Some(a), Some(b)) => Some(((a - b) / (2.0 * step), switched.get())),
                _ => None,
            }
        };
        let (numeric, kink) = ridders(central, h);
        let analytic = match kind {
            ParamKind::Q => grad.dq[stage][index],
            ParamKind::P => grad.dp[stage][index],
        };
        rows.push(GradcheckRow { stage, kind, index, analytic, numeric, rel_err: None, switched: kink });
    }
    let scale = rows.iter().filter_map(|r| r.numeric).map(f64::abs).fold(0.0, f64::max);
    let mut max_rel_err: f64 = 0.0;
    for r in rows.iter_mut() {
        if let Some(num) = r.numeric {
            let e = relative_error(r.analytic, num, scale);
            r.rel_err = Some(e);
            if !r.switched {
                max_rel_err = max_rel_err.max(e);
            }
        }
    }
    Ok(GradcheckReport { max_rel_err, curvature, rows })
}

const RIDDERS_STEPS: usize = 8;

/// Ridders' method on central differences `d(h), d(h/2), ...`. Steps that
/// cross a kink restart the tableau; the flag reports that every step did.
fn ridders(d: impl Fn(f64) -> Option<(f64, bool)>, h: f64) -> (Option<f64>, bool) {
    let mut table: Vec<Vec<f64>> = Vec::new();
    let mut best = None;
    let mut err = f64::INFINITY;
    let mut step = h;
    let mut all_kinked = true;
    for _ in 0..RIDDERS_STEPS {
        let Some((value, kinked)) = d(step) else { return (None, false) };
        step *= 0.5;
        if kinked {
            table.clear();
            err = f64::INFINITY;
            continue;
        }
        all_kinked = false;
        let mut col = vec![value];
        let mut fac = 4.0;
        for j in 1..=table.len() {
            let prev = &table[table.len() - 1];
            let next = (col[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            let est = (next - col[j - 1]).abs().max((next - prev[j - 1]).abs());
            col.push(next);
            fac *= 4.0;
            if est <= err {
                err = est;
                best = Some(next);
            }
        }
        if best.is_none() {
            best = Some(value);
        }
        let diverging = match table.last() {
            Some(prev) if !prev.is_empty() => (col[col.len() - 1] - prev[prev.len() - 1]).abs() >= 2.0 * err,
            _ => false,
        };
        table.push(col);
        if diverging {
            break;
        }
    }
    if all_kinked {
        // report the smallest step so the row still carries a number
        return (d(step * 2.0).map(|(v, _)| v), true);
    }
    (best, false)
}

/// Which input bounds and soft-bound penalties are active, stage by stage.
fn activity<S: System>(problem: &MpcProblem<S>, record: &SolveRecord) -> (Vec<Vec<bool>>, Vec<bool>) {
    let hinges = (0..record.inputs.len())
        .flat_map(|i| {
            let z = record.stage_vector(i);
            problem.penalty.bounds.iter().map(move |b| b.violation(z.as_slice()) > 0.0).collect::<Vec<_>>()
        })
        .collect();
    (record.active.clone(), hinges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::LtiSystem;
    use rand::Rng;

    fn lqr_problem(seed: u64) -> (MpcProblem<LtiSystem>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, horizon) = (3, 2, 6);
        let a = DMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let q = DVector::from_fn(n + m, |_, _| rng.gen_range(0.2..2.0));
        let p = DVector::from_fn(n + m, |_, _| rng.gen_range(-1.0..1.0));
        let cost = CostSchedule::expand(&q, &p, horizon);
        let lo = DVector::from_element(m, -100.0);
        let hi = DVector::from_element(m, 100.0);
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        (MpcProblem::new(LtiSystem::new(a, b), cost, lo, hi), x0)
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (prob, x0) = lqr_problem(1);
        let rec = solve(&prob, &x0, None).unwrap();
        let g = backward(&prob, &rec, &TrajectoryGradient::zeros_like(&rec)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn linear_in_upstream() {
        let (prob, x0) = lqr_problem(2);
        let rec = solve(&prob, &x0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_grad = || {
            let mut g = TrajectoryGradient::zeros_like(&rec);
            for v in g.states.iter_mut().chain(g.inputs.iter_mut()) {
                v.iter_mut().for_each(|e| *e = rng.gen_range(-1.0..1.0));
            }
            g
        };
        let (g1, g2) = (rand_grad(), rand_grad());
        let (al, be) = (0.7, -1.3);
        let mut mix = TrajectoryGradient::zeros_like(&rec);
        for i in 0..mix.states.len() {
            mix.states[i] = &g1.states[i] * al + &g2.states[i] * be;
        }
        for i in 0..mix.inputs.len() {
            mix.inputs[i] = &g1.inputs[i] * al + &g2.inputs[i] * be;
        }
        let r1 = backward(&prob, &rec, &g1).unwrap();
        let r2 = backward(&prob, &rec, &g2).unwrap();
        let rm = backward(&prob, &rec, &mix).unwrap();
        for i in 0..rm.dp.len() {
            let expect = &r1.dp[i] * al + &r2.dp[i] * be;
            assert!((&rm.dp[i] - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn lqr_gradcheck() {
        for seed in 0..3 {
            let (prob, x0) = lqr_problem(10 + seed);
            let rep = gradcheck(&prob, &x0, &LossSpec::InputEnergy, 1e-5, seed, None).unwrap();
            assert_eq!(rep.failed_entries(), 0);
            assert!(rep.max_rel_err < 1e-4, "seed {seed}: {}", rep.max_rel_err);
            assert_eq!(rep.curvature, Curvature::Lagrangian);
        }
    }

    #[test]
    fn active_inputs_block_gradient() {
        let (mut prob, x0) = lqr_problem(4);
        // bounds tight enough that some inputs saturate
        prob.lower = DVector::from_element(2, -0.05);
        prob.upper = DVector::from_element(2, 0.05);
        let rec = solve(&prob, &x0, None).unwrap();
        assert!(rec.active.iter().flatten().any(|&a| a));
        let (_, up) = LossSpec::InputEnergy.evaluate(&rec).unwrap();
        let g = backward(&prob, &rec, &up).unwrap();
        let n = 3;
        for (i, act) in rec.active.iter().enumerate() {
            for (j, &a) in act.iter().enumerate() {
                if a {
                    assert_eq!(g.dp[i][n + j], 0.0);
                    assert_eq!(g.dq[i][n + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn non_converged_is_refused() {
        let (prob, x0) = lqr_problem(5);
        let mut rec = solve(&prob, &x0, None).unwrap();
        rec.converged = false;
        let up = TrajectoryGradient::zeros_like(&rec);
        assert!(matches!(backward(&prob, &rec, &up), Err(Error::NotConverged)));
    }

    #[test]
    fn ridders_is_accurate_on_smooth_functions() {
        let f = |x: f64| (3.0 * x).sin() + x.powi(3);
        let x0 = 0.4;
        let d = |h: f64| Some(((f(x0 + h) - f(x0 - h)) / (2.0 * h), false));
        let (v, kink) = ridders(d, 0.1);
        let exact = 3.0 * (3.0 * x0).cos() + 3.0 * x0 * x0;
        assert!(!kink);
        assert!((v.unwrap() - exact).abs() < 1e-10);
    }

    #[test]
    fn ridders_skips_steps_across_a_kink() {
        // |x - 0.01| is smooth near 0 only for steps below 0.01
        let f = |x: f64| (x - 0.01).abs() + x * x;
        let d = |h: f64| Some(((f(h) - f(-h)) / (2.0 * h), h > 0.01));
        let (v, kink) = ridders(d, 0.1);
        assert!(!kink);
        assert!((v.unwrap() + 1.0).abs() < 1e-9);
        let always = |h: f64| Some(((f(h) - f(-h)) / (2.0 * h), true));
        assert!(ridders(always, 0.1).1);
    }

    #[test]
    fn zero_step_is_rejected() {
        let (prob, x0) = lqr_problem(6);
        assert!(matches!(gradcheck(&prob, &x0, &LossSpec::InputEnergy, 0.0, 0, None), Err(Error::InvalidStep(_))));
    }

    #[test]
    fn gradcheck_is_deterministic() {
        let (prob, x0) = lqr_problem(7);
        let a = gradcheck(&prob, &x0, &LossSpec::InputEnergy, 1e-5, 9, Some(12)).unwrap();
        let b = gradcheck(&prob, &x0, &LossSpec::InputEnergy, 1e-5, 9, Some(12)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 12);
    }

    #[test]
    fn mpcc_gradcheck_on_curved_track() {
        use crate::dynamics::{VehicleModel, VehicleState};
        use crate::solver::mpcc::{racing_problem, ManualCost, RacingSettings};
        use crate::track::TrackModel;
        use std::sync::Arc;
        let track = Arc::new(TrackModel::bundled("train").unwrap());
        let prob = racing_problem(
            VehicleModel::kinematic(),
            track,
            ManualCost::kinematic().expand(5),
            &RacingSettings::default(),
            SolverOptions::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..4 {
            let s = rng.gen_range(0.0..11.0);
            let x = VehicleState::kinematic(s, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.5..1.8));
            let x0 = prob.system.augment(&x);
            let reference: Vec<_> = (0..6).map(|_| DVector::from_fn(8, |_, _| rng.gen_range(-0.2..0.2))).collect();
            let loss = LossSpec::Tracking { reference, weights: DVector::from_element(8, 1.0) };
            let rep = gradcheck(&prob, &x0, &loss, 1e-5, 0, None).unwrap();
            assert!(rep.max_rel_err < 1e-2, "{}", rep.max_rel_err);
        }
    }
}
