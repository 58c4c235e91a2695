//! Contouring control in the Frenet frame.
//!
//! The controller state appends two entries to the physical vehicle state:
//! the progress at the start of the horizon `s0` (constant) and the progress
//! made within the horizon `s_delta = s - s0`. Rewarding `s_delta` through a
//! negative linear weight keeps the cost independent of where on the
//! circuit the horizon starts.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cost::{CostSchedule, Penalty, SoftBound};
use super::ilqr::{MpcProblem, SolverOptions};
use super::System;
use crate::dynamics::{ControlInput, KinematicState, ModelKind, VehicleModel, VehicleState};
use crate::error::{Error, Result};
use crate::track::TrackModel;

/// Controller-side settings that are not vehicle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RacingSettings {
    /// `omega_tight = tighten * omega`
    pub tighten: f64,
    /// Squared-hinge penalty weight on the soft state bounds.
    pub penalty_weight: f64,
}

impl Default for RacingSettings {
    fn default() -> Self {
        Self { tighten: 0.85, penalty_weight: 1e4 }
    }
}

/// Vehicle dynamics on a track, augmented with `(s0, s_delta)`.
#[derive(Debug, Clone)]
pub struct RacingSystem {
    pub model: VehicleModel,
    pub track: Arc<TrackModel>,
}

impl RacingSystem {
    pub fn new(model: VehicleModel, track: Arc<TrackModel>) -> Self {
        Self { model, track }
    }

    pub fn physical_dim(&self) -> usize {
        self.model.kind.state_dim()
    }

    pub fn s0_index(&self) -> usize {
        self.physical_dim()
    }

    pub fn s_delta_index(&self) -> usize {
        self.physical_dim() + 1
    }

    /// Controller state for a physical state; `s` is used as given.
    pub fn augment(&self, x: &VehicleState) -> DVector<f64> {
        let mut v = x.to_vec();
        v.push(x.s());
        v.push(0.0);
        DVector::from_vec(v)
    }

    pub fn physical(&self, z: &DVector<f64>) -> VehicleState {
        VehicleState::from_slice(self.model.kind, z.as_slice()).expect("augmented state too short")
    }

    /// Names of the entries of `z = [x, u]`, in cost order.
    pub fn variable_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = self.model.kind.state_names().to_vec();
        names.push("s0");
        names.push("s_delta");
        names.extend(self.model.kind.input_names());
        names
    }

    pub fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (lo, hi) = self.model.input_bounds();
        (DVector::from_row_slice(&lo), DVector::from_row_slice(&hi))
    }

    /// Soft bounds `|d| <= omega_tight` and `v <= v_max`.
    pub fn penalty(&self, settings: &RacingSettings) -> Penalty {
        let p = &self.model.params;
        Penalty {
            bounds: vec![
                SoftBound::Abs { index: 1, limit: settings.tighten * p.half_width },
                SoftBound::Upper { index: self.model.kind.speed_index(), limit: p.v_max },
            ],
            weight: settings.penalty_weight,
        }
    }

    /// A cold-start input guess: curvature feed-forward plus a lateral
    /// correction, rolled out open loop.
    pub fn initial_guess(&self, z0: &DVector<f64>, horizon: usize) -> Vec<DVector<f64>> {
        let p = &self.model.params;
        let (lo, hi) = self.model.input_bounds();
        let wheelbase = p.lf + p.lr;
        let sign = if self.model.kind == ModelKind::PacejkaSim { -1.0 } else { 1.0 };
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let x = self.physical(&z);
            let kappa = self.track.curvature(x.s());
            let steer = sign * ((wheelbase * kappa).atan() - 1.5 * x.d() - 1.0 * x.phi());
            let u = DVector::from_vec(vec![0.0f64.clamp(lo[0], hi[0]), steer.clamp(lo[1], hi[1])]);
            match self.step(&z, &u) {
                Ok(next) => z = next,
                Err(_) => {
                    out.push(u);
                    continue;
                }
            }
            out.push(u);
        }
        out
    }
}

impl System for RacingSystem {
    fn state_dim(&self) -> usize {
        self.physical_dim() + 2
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let np = self.physical_dim();
        let kappa = self.track.curvature(x[0]);
        let mut out = DVector::zeros(np + 2);
        self.model.step_slice(&x.as_slice()[..np], u.as_slice(), kappa, &mut out.as_mut_slice()[..np])?;
        let progress = out[0] - x[0];
        out[np] = x[np];
        out[np + 1] = x[np + 1] + progress;
        Ok(out)
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if self.model.kind != ModelKind::Kinematic {
            return super::linearize_fd(self, x, u, 1e-6);
        }
        let ks = KinematicState { s: x[0], d: x[1], phi: x[2], v: x[3] };
        let kappa = self.track.curvature(ks.s);
        let slope = self.track.curvature_slope(ks.s);
        let (fx, fu, fk) = self.model.kinematic_partials(&ks, ControlInput::new(u[0], u[1]), kappa)?;
        let mut a = DMatrix::zeros(6, 6);
        let mut b = DMatrix::zeros(6, 2);
        for i in 0..4 {
            for j in 0..4 {
                a[(i, j)] = fx[i][j];
            }
            a[(i, 0)] += fk[i] * slope;
            b[(i, 0)] = fu[i][0];
            b[(i, 1)] = fu[i][1];
        }
        a[(4, 4)] = 1.0;
        // s_delta' = s_delta + s' - s
        for j in 0..4 {
            a[(5, j)] = a[(0, j)];
        }
        a[(5, 0)] -= 1.0;
        a[(5, 5)] = 1.0;
        b[(5, 0)] = b[(0, 0)];
        b[(5, 1)] = b[(0, 1)];
        Ok((a, b))
    }
}

/// Hand-tuned cost vectors `(q, p)` over `z = [x, s0, s_delta, u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualCost {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl ManualCost {
    /// Kinematic model, simulation: `[s, d, phi, v, s0, s_delta, a, delta]`.
    pub fn kinematic() -> Self {
        Self {
            q: DVector::from_vec(vec![0.0, 3.0, 1.0, 0.01, 0.01, 0.01, 0.01, 1.0]),
            p: DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, -8.0, 0.0, 0.0]),
        }
    }

    /// Pacejka model, simulation: `[s, d, phi, r, vx, vy, s0, s_delta, tau, delta]`.
    pub fn pacejka_sim() -> Self {
        Self {
            q: DVector::from_vec(vec![0.0, 50.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]),
            p: DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -8.0, 0.0, 0.0]),
        }
    }

    /// Pacejka model on hardware; the published vectors are scaled by the horizon.
    pub fn pacejka_hardware(horizon: usize) -> Self {
        let n = horizon.max(1) as f64;
        let q = [0.0, 500.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0];
        let mut p = [0.0; 10];
        p[7] = -40.0;
        Self {
            q: DVector::from_iterator(10, q.iter().map(|v| v / n)),
            p: DVector::from_iterator(10, p.iter().map(|v| v / n)),
        }
    }

    pub fn for_kind(kind: ModelKind, horizon: usize) -> Self {
        match kind {
            ModelKind::Kinematic => Self::kinematic(),
            ModelKind::PacejkaSim => Self::pacejka_sim(),
            ModelKind::PacejkaHardware => Self::pacejka_hardware(horizon),
        }
    }

    pub fn expand(&self, horizon: usize) -> CostSchedule {
        CostSchedule::expand(&self.q, &self.p, horizon)
    }
}

/// MPCC problem for `model` on `track` with the given schedule.
pub fn racing_problem(
    model: VehicleModel,
    track: Arc<TrackModel>,
    cost: CostSchedule,
    settings: &RacingSettings,
    options: SolverOptions,
) -> Result<MpcProblem<RacingSystem>> {
    model.params.validate()?;
    if !(settings.tighten > 0.0 && settings.tighten < 1.0) {
        return Err(Error::Config(format!("tightening factor {} must lie in (0, 1)", settings.tighten)));
    }
    let system = RacingSystem::new(model, track);
    if cost.dim() != system.state_dim() + system.input_dim() {
        return Err(Error::Dimension(format!(
            "cost dimension {} does not match the {:?} controller ({} entries)",
            cost.dim(),
            model.kind,
            system.state_dim() + system.input_dim()
        )));
    }
    let penalty = system.penalty(settings);
    let (lo, hi) = system.input_bounds();
    Ok(MpcProblem::new(system, cost, lo, hi).with_penalty(penalty).with_options(options))
}
