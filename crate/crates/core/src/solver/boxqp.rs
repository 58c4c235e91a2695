//! Small box-constrained QPs `min 0.5 x'Hx + g'x  s.t. lo <= x <= hi`.
//!
//! Input dimensions in this crate are tiny (two for the vehicle models), so
//! the QP is solved exactly by enumerating the `3^m` active sets and
//! returning the one that satisfies the KKT conditions.

use nalgebra::{DMatrix, DVector};

const KKT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundState {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    pub state: Vec<BoundState>,
    /// Cholesky-inverse of the free block of `H` (rows/cols of free indices).
    pub free_inv: DMatrix<f64>,
}

impl BoxQpSolution {
    pub fn free_indices(&self) -> Vec<usize> {
        self.state.iter().enumerate().filter(|(_, s)| **s == BoundState::Free).map(|(i, _)| i).collect()
    }
}

/// Returns `None` if the free block of `H` is not positive definite for the
/// optimal active set (or no active set satisfies the KKT conditions).
pub fn solve_box_qp(h: &DMatrix<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Option<BoxQpSolution> {
    let m = g.len();
    assert!(m <= 12, "enumeration is only meant for small input dimensions");
    // the unconstrained minimizer must exist for the problem to be convex
    h.clone().cholesky()?;
    let scale = 1.0 + g.amax() + h.amax();
    let combos = 3usize.pow(m as u32);
    // try the fully free set first, it is by far the most common
    for code in 0..combos {
        let mut state = Vec::with_capacity(m);
        let mut c = code;
        for _ in 0..m {
            state.push(match c % 3 {
                0 => BoundState::Free,
                1 => BoundState::Lower,
                _ => BoundState::Upper,
            });
            c /= 3;
        }
        if let Some(sol) = try_active_set(h, g, lo, hi, state, scale) {
            return Some(sol);
        }
    }
    None
}

fn try_active_set(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    state: Vec<BoundState>,
    scale: f64,
) -> Option<BoxQpSolution> {
    let m = g.len();
    let mut x = DVector::zeros(m);
    let mut free = Vec::new();
    for (i, s) in state.iter().enumerate() {
        match s {
            BoundState::Free => free.push(i),
            BoundState::Lower => x[i] = lo[i],
            BoundState::Upper => x[i] = hi[i],
        }
    }
    let nf = free.len();
    let mut free_inv = DMatrix::zeros(nf, nf);
    if nf > 0 {
        let hff = DMatrix::from_fn(nf, nf, |a, b| h[(free[a], free[b])]);
        let rhs = DVector::from_fn(nf, |a, _| {
            let i = free[a];
            let mut r = -g[i];
            for j in 0..m {
                if state[j] != BoundState::Free {
                    r -= h[(i, j)] * x[j];
                }
            }
            r
        });
        let chol = hff.cholesky()?;
        let xf = chol.solve(&rhs);
        for (a, &i) in free.iter().enumerate() {
            let tol = KKT_TOL * (1.0 + lo[i].abs().max(hi[i].abs()));
            if xf[a] < lo[i] - tol || xf[a] > hi[i] + tol {
                return None;
            }
            x[i] = xf[a].clamp(lo[i], hi[i]);
        }
        free_inv = chol.inverse();
    }
    // multiplier signs for the clamped coordinates
    let grad = h * &x + g;
    for (i, s) in state.iter().enumerate() {
        let tol = KKT_TOL * scale;
        match s {
            BoundState::Lower if grad[i] < -tol => return None,
            BoundState::Upper if grad[i] > tol => return None,
            _ => {}
        }
    }
    Some(BoxQpSolution { x, state, free_inv })
}
