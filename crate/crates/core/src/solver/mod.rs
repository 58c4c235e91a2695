//! Receding-horizon MPCC solver.
//!
//! The optimizer is an iLQR with an exact box-QP for the input bounds in
//! every backward step and smooth squared-hinge penalties for the state
//! bounds. [`ilqr::solve`] returns a [`ilqr::SolveRecord`] that carries
//! everything [`crate::diffmpc`] needs to differentiate the solution.

pub mod boxqp;
pub mod cost;
pub mod ilqr;
pub mod lap;
pub mod mpcc;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub use cost::{CostSchedule, Penalty, SoftBound};
pub use ilqr::{solve, MpcProblem, SolveRecord, SolverOptions};
pub use lap::{require_lap, run_closed_loop, run_lap, LapFailure, LapResult, MpcPolicy, Policy, StepLog};
pub use mpcc::{racing_problem, ManualCost, RacingSettings, RacingSystem};

/// Discrete-time dynamics `x' = f(x, u)` seen by the optimizer.
pub trait System {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobians `(df/dx, df/du)`. Defaults to central differences.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        linearize_fd(self, x, u, 1e-6)
    }

    /// Hessian of `lambda' f(z)` with respect to `z = [x, u]`.
    ///
    /// Computed by central differences of the Jacobian-transpose product.
    fn weighted_hessian(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let h = 1e-5;
        let mut out = DMatrix::zeros(n + m, n + m);
        let grad = |x: &DVector<f64>, u: &DVector<f64>| -> Result<DVector<f64>> {
            let (a, b) = self.jacobians(x, u)?;
            let mut g = DVector::zeros(n + m);
            g.rows_mut(0, n).copy_from(&(a.transpose() * lambda));
            g.rows_mut(n, m).copy_from(&(b.transpose() * lambda));
            Ok(g)
        };
        for j in 0..n + m {
            let (mut xp, mut up) = (x.clone(), u.clone());
            let (mut xm, mut um) = (x.clone(), u.clone());
            if j < n {
                xp[j] += h;
                xm[j] -= h;
            } else {
                up[j - n] += h;
                um[j - n] -= h;
            }
            let col = (grad(&xp, &up)? - grad(&xm, &um)?) / (2.0 * h);
            out.set_column(j, &col);
        }
        Ok((&out + out.transpose()) * 0.5)
    }
}

/// Central-difference Jacobians of a [`System`] with step `h`.
pub fn linearize_fd<S: System + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (sys.step(&xp, u)? - sys.step(&xm, u)?) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..m {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (sys.step(x, &up)? - sys.step(x, &um)?) / (2.0 * h);
        b.set_column(j, &col);
    }
    Ok((a, b))
}

/// Linear time-invariant dynamics `x' = A x + B u`.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(a.nrows(), b.nrows());
        Self { a, b }
    }
}

impl System for LtiSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }

    fn weighted_hessian(&self, _x: &DVector<f64>, _u: &DVector<f64>, _l: &DVector<f64>) -> Result<DMatrix<f64>> {
        let k = self.state_dim() + self.input_dim();
        Ok(DMatrix::zeros(k, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_linearization_of_lti_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let sys = LtiSystem::new(a.clone(), b.clone());
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let u = DVector::from_vec(vec![2.0]);
        let (fa, fb) = linearize_fd(&sys, &x, &u, 1e-6).unwrap();
        assert!((fa - a).amax() < 1e-9);
        assert!((fb - b).amax() < 1e-9);
    }
}
