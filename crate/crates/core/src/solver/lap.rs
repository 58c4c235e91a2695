//! Closed-loop simulation: a policy drives the plant model around the track.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::cost::CostSchedule;
use super::ilqr::{solve, MpcProblem, SolveRecord};
use super::mpcc::RacingSystem;
use crate::dynamics::{ControlInput, VehicleModel, VehicleState};
use crate::error::{Error, Result};
use crate::track::TrackModel;

/// Anything that maps the current vehicle state to an input.
pub trait Policy {
    /// Forget warm starts and other internal state.
    fn reset(&mut self);
    fn act(&mut self, x: &VehicleState) -> Result<ControlInput>;
}

/// Receding-horizon MPCC controller with shifted warm starts.
#[derive(Debug, Clone)]
pub struct MpcPolicy {
    pub problem: MpcProblem<RacingSystem>,
    warm: Option<Vec<DVector<f64>>>,
    /// Record of the most recent solve.
    pub last: Option<SolveRecord>,
}

impl MpcPolicy {
    pub fn new(problem: MpcProblem<RacingSystem>) -> Self {
        Self { problem, warm: None, last: None }
    }

    pub fn track(&self) -> &Arc<TrackModel> {
        &self.problem.system.track
    }

    /// Controller state for a plant state: progress is wrapped onto `[0, L)`.
    pub fn controller_state(&self, x: &VehicleState) -> DVector<f64> {
        let sys = &self.problem.system;
        sys.augment(&x.with_s(sys.track.wrap(x.s())))
    }

    /// Solves from `x`, using `cost` in place of the problem's schedule if given.
    pub fn solve_at(&mut self, x: &VehicleState, cost: Option<CostSchedule>) -> Result<SolveRecord> {
        let z0 = self.controller_state(x);
        let prob;
        let prob_ref = match cost {
            Some(c) => {
                prob = self.problem.with_cost(c);
                &prob
            }
            None => &self.problem,
        };
        let stages = prob_ref.horizon + 1;
        let warm = match self.warm.take() {
            Some(w) if w.len() == stages => w,
            _ => prob_ref.system.initial_guess(&z0, prob_ref.horizon),
        };
        let rec = solve(prob_ref, &z0, Some(&warm))?;
        let mut shifted: Vec<DVector<f64>> = rec.inputs[1..].to_vec();
        shifted.push(rec.inputs.last().unwrap().clone());
        self.warm = Some(shifted);
        self.last = Some(rec.clone());
        Ok(rec)
    }
}

impl Policy for MpcPolicy {
    fn reset(&mut self) {
        self.warm = None;
        self.last = None;
    }

    fn act(&mut self, x: &VehicleState) -> Result<ControlInput> {
        let rec = self.solve_at(x, None)?;
        Ok(ControlInput::new(rec.inputs[0][0], rec.inputs[0][1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LapFailure {
    StepBudget,
    Infeasible { step: usize, message: String },
    OffTrack { step: usize, d: f64 },
}

impl fmt::Display for LapFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LapFailure::StepBudget => write!(f, "step budget exhausted"),
            LapFailure::Infeasible { step, message } => write!(f, "controller failed at step {step}: {message}"),
            LapFailure::OffTrack { step, d } => write!(f, "left the track at step {step} (d = {d:.3})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Plant state before the input is applied; progress is unwrapped.
    pub state: Vec<f64>,
    pub input: [f64; 2],
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapResult {
    /// Seconds, interpolated between the two steps that straddle the line.
    pub lap_time: Option<f64>,
    pub failure: Option<LapFailure>,
    pub steps: Vec<StepLog>,
    /// Final plant state.
    pub final_state: Vec<f64>,
}

impl LapResult {
    pub fn completed(&self) -> bool {
        self.lap_time.is_some()
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.solve_seconds).sum::<f64>() / self.steps.len() as f64
    }

    pub fn max_abs_d(&self) -> f64 {
        self.steps.iter().map(|s| s.state[1].abs()).fold(0.0, f64::max)
    }

    /// One row per step: state, input, Cartesian pose, solve time.
    pub fn write_csv(&self, track: &TrackModel, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.final_state.len();
        let mut header = vec!["step".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend(["u0", "u1", "px", "py", "heading", "solve_ms"].map(String::from));
        writeln!(f, "{}", header.join(","))?;
        for s in &self.steps {
            let pose = track.frenet_to_cartesian_unbounded(s.state[0], s.state[1], s.state[2]);
            let mut row = vec![s.step.to_string()];
            row.extend(s.state.iter().map(|v| format!("{v:.6}")));
            row.push(format!("{:.6}", s.input[0]));
            row.push(format!("{:.6}", s.input[1]));
            row.push(format!("{:.6}", pose.x));
            row.push(format!("{:.6}", pose.y));
            row.push(format!("{:.6}", pose.heading));
            row.push(format!("{:.4}", s.solve_seconds * 1e3));
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs `policy` on `plant` for at most `max_steps`, stopping once progress
/// has advanced by one full track length from `x0`.
pub fn run_lap(
    plant: &VehicleModel,
    track: &TrackModel,
    policy: &mut dyn Policy,
    x0: VehicleState,
    max_steps: usize,
) -> LapResult {
    simulate(plant, track, policy, x0, max_steps, Some(x0.s() + track.total_length()))
}

/// Runs `policy` for exactly `steps` steps unless it fails first.
pub fn run_closed_loop(
    plant: &VehicleModel,
    track: &TrackModel,
    policy: &mut dyn Policy,
    x0: VehicleState,
    steps: usize,
) -> LapResult {
    simulate(plant, track, policy, x0, steps, None)
}

fn simulate(
    plant: &VehicleModel,
    track: &TrackModel,
    policy: &mut dyn Policy,
    x0: VehicleState,
    max_steps: usize,
    finish: Option<f64>,
) -> LapResult {
    let dt = plant.params.dt;
    let mut x = x0;
    let mut steps = Vec::new();
    let mut failure = None;
    let mut lap_time = None;
    for k in 0..max_steps {
        let t0 = Instant::now();
        let u = match policy.act(&x) {
            Ok(u) => u,
            Err(e) => {
                failure = Some(LapFailure::Infeasible { step: k, message: e.to_string() });
                break;
            }
        };
        let elapsed = t0.elapsed().as_secs_f64();
        steps.push(StepLog { step: k, state: x.to_vec(), input: [u.drive, u.steer], solve_seconds: elapsed });
        let next = match plant.step(&x, u, track.curvature(x.s())) {
            Ok(n) => n,
            Err(e) => {
                failure = Some(LapFailure::Infeasible { step: k, message: e.to_string() });
                break;
            }
        };
        if next.d().abs() > track.half_width() {
            x = next;
            failure = Some(LapFailure::OffTrack { step: k + 1, d: x.d() });
            break;
        }
        if let Some(line) = finish {
            if next.s() >= line {
                let frac = (line - x.s()) / (next.s() - x.s());
                lap_time = Some((k as f64 + frac) * dt);
                x = next;
                break;
            }
        }
        x = next;
    }
    if finish.is_some() && lap_time.is_none() && failure.is_none() {
        failure = Some(LapFailure::StepBudget);
    }
    LapResult { lap_time, failure, steps, final_state: x.to_vec() }
}

/// Cold-start check used by callers that need an error instead of a result.
pub fn require_lap(result: &LapResult) -> Result<f64> {
    result.lap_time.ok_or_else(|| {
        Error::Infeasible(result.failure.as_ref().map(|f| f.to_string()).unwrap_or_else(|| "no lap".into()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::ilqr::SolverOptions;
    use crate::solver::mpcc::{racing_problem, ManualCost, RacingSettings};

    /// Holds a constant input.
    struct Constant(ControlInput);

    impl Policy for Constant {
        fn reset(&mut self) {}
        fn act(&mut self, _x: &VehicleState) -> Result<ControlInput> {
            Ok(self.0)
        }
    }

    #[test]
    fn lap_time_interpolates_crossing() {
        // a straight-line loop would not close, so drive a circle at constant speed
        let track = TrackModel::circle(1.0, 0.3).unwrap();
        let plant = VehicleModel::kinematic();
        let p = &plant.params;
        let steer = ((p.lf + p.lr) * 1.0).atan();
        let mut pol = Constant(ControlInput::new(0.0, steer));
        let v = 1.0;
        let x0 = VehicleState::kinematic(0.0, 0.0, 0.0, v);
        let res = run_lap(&plant, &track, &mut pol, x0, 10_000);
        let t = res.lap_time.unwrap();
        // independent replay: find the straddling pair and interpolate linearly
        let mut x = x0;
        let mut k = 0;
        let expect = loop {
            let next = plant.step(&x, pol.0, track.curvature(x.s())).unwrap();
            if next.s() >= track.total_length() {
                break (k as f64 + (track.total_length() - x.s()) / (next.s() - x.s())) * p.dt;
            }
            x = next;
            k += 1;
        };
        assert!((t - expect).abs() < 1e-12, "{t} vs {expect}");
        assert!((t - track.total_length() / v).abs() < 0.05);
    }

    #[test]
    fn off_track_is_reported() {
        let track = TrackModel::circle(1.0, 0.2).unwrap();
        let plant = VehicleModel::kinematic();
        let mut pol = Constant(ControlInput::new(0.0, 0.0));
        let res = run_lap(&plant, &track, &mut pol, VehicleState::kinematic(0.0, 0.0, 0.0, 1.0), 1000);
        assert!(matches!(res.failure, Some(LapFailure::OffTrack { .. })));
        assert!(!res.completed());
    }

    #[test]
    fn mpc_completes_training_lap() {
        let track = Arc::new(TrackModel::bundled("train").unwrap());
        let prob = racing_problem(
            VehicleModel::kinematic(),
            track.clone(),
            ManualCost::kinematic().expand(15),
            &RacingSettings::default(),
            SolverOptions::default(),
        )
        .unwrap();
        let mut pol = MpcPolicy::new(prob);
        let res = run_lap(&VehicleModel::kinematic(), &track, &mut pol, VehicleState::kinematic(0.0, 0.0, 0.0, 0.5), 2000);
        assert!(res.completed(), "{:?}", res.failure);
        assert!(res.max_abs_d() <= track.half_width());
    }
}
