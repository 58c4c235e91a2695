//! Diagonal quadratic-plus-linear stage costs and soft state bounds.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to learned quadratic weights.
pub const Q_MIN: f64 = 1e-4;

/// Per-stage weights `(q_i, p_i)` for stages `0..=N` over `z = [x, u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSchedule {
    pub q: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
}

impl CostSchedule {
    /// Repeats one `(q, p)` pair over `horizon + 1` stages.
    pub fn expand(q: &DVector<f64>, p: &DVector<f64>, horizon: usize) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have the same length");
        Self { q: vec![q.clone(); horizon + 1], p: vec![p.clone(); horizon + 1] }
    }

    /// Number of stages minus one.
    pub fn horizon(&self) -> usize {
        self.q.len() - 1
    }

    pub fn stages(&self) -> usize {
        self.q.len()
    }

    /// Length of each weight vector (`n + m`).
    pub fn dim(&self) -> usize {
        self.q[0].len()
    }

    pub fn zeros_like(&self) -> Self {
        let z = DVector::zeros(self.dim());
        Self { q: vec![z.clone(); self.stages()], p: vec![z; self.stages()] }
    }

    /// Quadratic weights must be nonnegative everywhere and at least
    /// `q_min` on the input entries `first_input..`, which keeps every
    /// stage's input Hessian positive definite.
    pub fn validate(&self, first_input: usize, q_min: f64) -> Result<()> {
        if self.q.len() != self.p.len() || self.q.is_empty() {
            return Err(Error::Dimension("q and p schedules must be non-empty and equally long".into()));
        }
        for (i, (q, p)) in self.q.iter().zip(&self.p).enumerate() {
            if q.len() != self.dim() || p.len() != self.dim() {
                return Err(Error::Dimension(format!("stage {i} weight length mismatch")));
            }
            for (j, &w) in q.iter().enumerate() {
                let floor = if j >= first_input { q_min } else { 0.0 };
                if !(w >= floor) {
                    return Err(Error::Config(format!("q[{i}][{j}] = {w} below {floor}")));
                }
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("p[{i}] not finite")));
            }
        }
        Ok(())
    }

    /// Flat view `[q_0, p_0, q_1, p_1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.stages() * self.dim());
        for (q, p) in self.q.iter().zip(&self.p) {
            out.extend(q.iter());
            out.extend(p.iter());
        }
        out
    }

    /// Entry-wise sum with another schedule of the same shape.
    pub fn add(&self, other: &CostSchedule) -> CostSchedule {
        CostSchedule {
            q: self.q.iter().zip(&other.q).map(|(a, b)| a + b).collect(),
            p: self.p.iter().zip(&other.p).map(|(a, b)| a + b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SoftBound {
    /// `|z[index]| <= limit`
    Abs { index: usize, limit: f64 },
    /// `z[index] <= limit`
    Upper { index: usize, limit: f64 },
}

impl SoftBound {
    /// Amount by which `z` violates the bound (0 when satisfied).
    pub fn violation(&self, z: &[f64]) -> f64 {
        match *self {
            SoftBound::Abs { index, limit } => (z[index].abs() - limit).max(0.0),
            SoftBound::Upper { index, limit } => (z[index] - limit).max(0.0),
        }
    }
}

/// Squared-hinge penalty `weight * violation^2` summed over `bounds`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Penalty {
    pub bounds: Vec<SoftBound>,
    pub weight: f64,
}

impl Penalty {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn max_violation(&self, z: &[f64]) -> f64 {
        self.bounds.iter().map(|b| b.violation(z)).fold(0.0, f64::max)
    }
}

/// Value, gradient and diagonal Hessian of one stage.
#[derive(Debug, Clone)]
pub struct StageDerivatives {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DVector<f64>,
}

pub fn stage_value(cost: &CostSchedule, penalty: &Penalty, i: usize, z: &[f64]) -> f64 {
    let (q, p) = (&cost.q[i], &cost.p[i]);
    let mut v = 0.0;
    for j in 0..z.len() {
        v += q[j] * z[j] * z[j] + p[j] * z[j];
    }
    for b in &penalty.bounds {
        let e = b.violation(z);
        v += penalty.weight * e * e;
    }
    v
}

/// `sum_j q[j] z[j]^2 + p[j] z[j]` plus the soft-bound penalties.
pub fn build_stage_cost(cost: &CostSchedule, penalty: &Penalty, i: usize, z: &[f64]) -> StageDerivatives {
    let (q, p) = (&cost.q[i], &cost.p[i]);
    let k = z.len();
    let mut grad = DVector::zeros(k);
    let mut hess = DVector::zeros(k);
    for j in 0..k {
        grad[j] = 2.0 * q[j] * z[j] + p[j];
        hess[j] = 2.0 * q[j];
    }
    for b in &penalty.bounds {
        match *b {
            SoftBound::Abs { index, limit } => {
                let e = z[index].abs() - limit;
                if e > 0.0 {
                    grad[index] += 2.0 * penalty.weight * e * z[index].signum();
                    hess[index] += 2.0 * penalty.weight;
                }
            }
            SoftBound::Upper { index, limit } => {
                let e = z[index] - limit;
                if e > 0.0 {
                    grad[index] += 2.0 * penalty.weight * e;
                    hess[index] += 2.0 * penalty.weight;
                }
            }
        }
    }
    StageDerivatives { value: stage_value(cost, penalty, i, z), grad, hess }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::mpcc::ManualCost;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_point_has_zero_cost() {
        let c = CostSchedule::expand(&DVector::from_element(1, 1.0), &DVector::zeros(1), 0);
        let d = build_stage_cost(&c, &Penalty::none(), 0, &[0.0]);
        assert_eq!(d.value, 0.0);
        assert_eq!(d.grad[0], 0.0);
    }

    #[test]
    fn manual_kinematic_cost_values() {
        let m = ManualCost::kinematic();
        let c = CostSchedule::expand(&m.q, &m.p, 3);
        let mut z = vec![0.0; 8];
        z[1] = 0.1;
        assert_abs_diff_eq!(stage_value(&c, &Penalty::none(), 0, &z), 0.03, epsilon = 1e-15);
        let mut z = vec![0.0; 8];
        z[5] = 0.5;
        let expect = 0.01 * 0.25 - 8.0 * 0.5;
        assert_abs_diff_eq!(stage_value(&c, &Penalty::none(), 0, &z), expect, epsilon = 1e-15);
        // the linear progress term alone
        let lin: f64 = c.p[0].iter().zip(&z).map(|(p, z)| p * z).sum();
        assert_abs_diff_eq!(lin, -4.0, epsilon = 1e-15);
    }

    #[test]
    fn penalty_gradient_matches_differences() {
        let c = CostSchedule::expand(&DVector::from_element(3, 0.5), &DVector::from_element(3, 0.1), 0);
        let pen = Penalty {
            bounds: vec![SoftBound::Abs { index: 0, limit: 0.2 }, SoftBound::Upper { index: 2, limit: 1.0 }],
            weight: 1e3,
        };
        for z in [[0.3, 0.0, 1.2], [-0.25, 1.0, 0.5], [0.1, -0.4, 1.01]] {
            let d = build_stage_cost(&c, &pen, 0, &z);
            for j in 0..3 {
                let h = 1e-7;
                let (mut a, mut b) = (z, z);
                a[j] += h;
                b[j] -= h;
                let fd = (stage_value(&c, &pen, 0, &a) - stage_value(&c, &pen, 0, &b)) / (2.0 * h);
                assert_abs_diff_eq!(fd, d.grad[j], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn validation_floors_only_inputs() {
        let m = ManualCost::kinematic();
        let c = CostSchedule::expand(&m.q, &m.p, 2);
        c.validate(6, Q_MIN).unwrap();
        let mut bad = c.clone();
        bad.q[1][7] = 0.0;
        assert!(bad.validate(6, Q_MIN).is_err());
    }
}
