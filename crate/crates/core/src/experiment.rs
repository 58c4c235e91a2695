//! Experiment harness: horizon sweeps, imitation error tables, lap and
//! timing comparisons and plot data export. Every function returns a plain
//! table type that can be written as CSV.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dynamics::{ModelKind, VehicleModel, VehicleState};
use crate::error::{Error, Result};
use crate::solver::{run_lap, LapResult, MpcPolicy, Policy, System};
use crate::track::TrackModel;
use crate::zipmpc::{
    compose, imitation_loss, imitation_loss_stages, load_controller, pearson, sample_feasible, ConstantDelta,
    EmpcClone, SampleState, Setup, TrainConfig, ZipMpc,
};

/// `reps` copies of `base` with Gaussian noise of standard deviation `sigma`
/// on `d`, `phi` and the speed. The first copy is noise free when `sigma` is 0.
pub fn noisy_starts(kind: ModelKind, base: &VehicleState, sigma: f64, reps: usize, seed: u64) -> Result<Vec<VehicleState>> {
    if sigma == 0.0 {
        return Ok(vec![*base; reps]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..reps)
        .map(|_| {
            let mut v = base.to_vec();
            let speed = kind.speed_index();
            v[1] += normal.sample(&mut rng);
            v[2] += normal.sample(&mut rng);
            v[speed] = (v[speed] + normal.sample(&mut rng)).max(0.05);
            VehicleState::from_slice(kind, &v).expect("same layout")
        })
        .collect())
}

/// Summary of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lap_time: Option<f64>,
    pub failure: Option<String>,
    pub max_abs_d: f64,
    /// Every applied input lies inside the box, without tolerance.
    pub inputs_in_bounds: bool,
    pub step_seconds: Vec<f64>,
}

impl RunSummary {
    pub fn from_lap(lap: &LapResult, model: &VehicleModel) -> Self {
        let (lo, hi) = model.input_bounds();
        let inside = lap.steps.iter().all(|s| (0..2).all(|j| lo[j] <= s.input[j] && s.input[j] <= hi[j]));
        Self {
            lap_time: lap.lap_time,
            failure: lap.failure.as_ref().map(|f| f.to_string()),
            max_abs_d: lap.max_abs_d(),
            inputs_in_bounds: inside,
            step_seconds: lap.steps.iter().map(|s| s.solve_seconds).collect(),
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        0.5 * (s[k - 1] + s[k])
    }
}

/// Runs of one controller from several starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapStats {
    pub runs: Vec<RunSummary>,
}

impl LapStats {
    pub fn completed(&self) -> usize {
        self.runs.iter().filter(|r| r.lap_time.is_some()).count()
    }

    pub fn all_completed(&self) -> bool {
        self.completed() == self.runs.len()
    }

    /// Mean and sample standard deviation of the lap time, `None` unless
    /// every run finished.
    pub fn lap(&self) -> Option<(f64, f64)> {
        if !self.all_completed() || self.runs.is_empty() {
            return None;
        }
        let laps: Vec<f64> = self.runs.iter().filter_map(|r| r.lap_time).collect();
        Some(mean_std(&laps))
    }

    fn all_steps(&self) -> Vec<f64> {
        self.runs.iter().flat_map(|r| r.step_seconds.iter().copied()).collect()
    }

    /// Mean and standard deviation of the per-step controller time, seconds.
    pub fn step_time(&self) -> (f64, f64) {
        mean_std(&self.all_steps())
    }

    pub fn median_step_time(&self) -> f64 {
        median(&self.all_steps())
    }

    pub fn max_abs_d(&self) -> f64 {
        self.runs.iter().map(|r| r.max_abs_d).fold(0.0, f64::max)
    }

    pub fn inputs_in_bounds(&self) -> bool {
        self.runs.iter().all(|r| r.inputs_in_bounds)
    }
}

/// Runs `policy` from every start, resetting in between.
pub fn run_many(
    model: &VehicleModel,
    track: &TrackModel,
    policy: &mut dyn Policy,
    starts: &[VehicleState],
    lap_steps: usize,
) -> (LapStats, Vec<LapResult>) {
    let mut laps = Vec::with_capacity(starts.len());
    for x0 in starts {
        policy.reset();
        laps.push(run_lap(model, track, policy, *x0, lap_steps));
    }
    (LapStats { runs: laps.iter().map(|l| RunSummary::from_lap(l, model)).collect() }, laps)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.filter(|x| x.is_finite()).map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub stats: LapStats,
}

/// Lap time against horizon length for the manual-cost controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonTable {
    pub rows: Vec<HorizonRow>,
}

impl HorizonTable {
    pub const HEADER: &'static str = "horizon,runs,completed,mean_lap_s,std_lap_s,mean_step_ms,median_step_ms,max_abs_d";

    pub fn incomplete(&self) -> bool {
        self.rows.iter().any(|r| !r.stats.all_completed())
    }

    /// Mean lap times in row order (`None` for rows with an unfinished run).
    pub fn mean_laps(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.stats.lap().map(|l| l.0)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let lap = r.stats.lap();
            let (step, _) = r.stats.step_time();
            out += &format!(
                "{},{},{},{},{},{:.4},{:.4},{:.4}\n",
                r.horizon,
                r.stats.runs.len(),
                r.stats.completed(),
                fmt_opt(lap.map(|l| l.0), 3),
                fmt_opt(lap.map(|l| l.1), 3),
                step * 1e3,
                r.stats.median_step_time() * 1e3,
                r.stats.max_abs_d()
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv())
    }
}

impl fmt::Display for HorizonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

pub fn horizon_study(
    setup: &Setup,
    horizons: &[usize],
    starts: &[VehicleState],
    lap_steps: usize,
) -> Result<HorizonTable> {
    if horizons.is_empty() || starts.is_empty() {
        return Err(Error::Config("horizon study needs at least one horizon and one start".into()));
    }
    let mut rows = Vec::with_capacity(horizons.len());
    for &n in horizons {
        let mut pol = setup.mpc(n)?;
        let (stats, _) = run_many(&setup.model, &setup.track, &mut pol, starts, lap_steps);
        rows.push(HorizonRow { horizon: n, stats });
    }
    Ok(HorizonTable { rows })
}

/// Controllers compared on imitation error.
pub enum Method<'a> {
    ShortManual,
    LongManual,
    Constant(&'a ConstantDelta),
    Zip(&'a ZipMpc),
    Clone(&'a EmpcClone),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ShortManual => "mpc_short",
            Method::LongManual => "mpc_long",
            Method::Constant(_) => "constant_delta",
            Method::Zip(_) => "zipmpc",
            Method::Clone(_) => "empc_clone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationRow {
    pub method: String,
    /// Square root of the mean imitation loss over the states that solved.
    pub rmse: f64,
    pub evaluated: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationTable {
    pub rows: Vec<ImitationRow>,
}

impl ImitationTable {
    pub const HEADER: &'static str = "method,rmse,evaluated,failed";

    pub fn get(&self, method: &str) -> Option<&ImitationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out += &format!("{},{:.6},{},{}\n", r.method, r.rmse, r.evaluated, r.failed);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv())
    }
}

impl fmt::Display for ImitationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

/// Fixed set of feasible states with their long-horizon solutions.
pub fn validation_set(setup: &Setup, cfg: &TrainConfig, count: usize, seed: u64) -> Result<Vec<SampleState>> {
    let long = setup.problem(cfg.long_horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_feasible(setup, &cfg.ranges, &mut rng, &long, cfg.max_retries)).collect()
}

/// Loss of one method on one sample, `None` if its solve failed.
fn sample_loss(
    setup: &Setup,
    cfg: &TrainConfig,
    weights: &DVector<f64>,
    method: &Method,
    s: &SampleState,
) -> Result<Option<f64>> {
    let nd = cfg.loss_horizon;
    let short = cfg.short_horizon;
    let manual = setup.manual_cost(short).expand(short);
    let cost = match method {
        Method::LongManual => return Ok(Some(imitation_loss(&s.long, &s.long, nd, weights)?.0)),
        Method::Clone(c) => return clone_loss(setup, c, s, nd, weights).map(Some),
        Method::ShortManual => manual,
        Method::Constant(delta) => compose(&manual, &delta.schedule(short), &setup.frozen_entries()).0,
        Method::Zip(z) => z.cost_at(&s.state)?,
    };
    let prob = setup.problem_with(cost)?;
    Ok(match setup.cold_solve(&prob, &s.state) {
        Ok(rec) if rec.converged => Some(imitation_loss(&rec, &s.long, nd, weights)?.0),
        _ => None,
    })
}

/// The clone has no prediction, so its trajectory is its own open-loop rollout.
fn clone_loss(setup: &Setup, c: &EmpcClone, s: &SampleState, nd: usize, weights: &DVector<f64>) -> Result<f64> {
    let sys = crate::solver::RacingSystem::new(setup.model, setup.track.clone());
    let mut z = sys.augment(&s.state.with_s(setup.track.wrap(s.state.s())));
    let mut stages = Vec::with_capacity(nd);
    for _ in 0..nd {
        let u = c.input(&sys.physical(&z))?;
        let uv = DVector::from_vec(vec![u.drive, u.steer]);
        stages.push(DVector::from_iterator(z.len() + 2, z.iter().chain(uv.iter()).copied()));
        z = sys.step(&z, &uv)?;
    }
    let long: Vec<_> = (0..nd).map(|i| s.long.stage_vector(i)).collect();
    Ok(imitation_loss_stages(&stages, &long, nd, weights)?.0)
}

pub fn evaluate_imitation(
    setup: &Setup,
    cfg: &TrainConfig,
    samples: &[SampleState],
    methods: &[Method],
) -> Result<ImitationTable> {
    let weights = cfg.weights(setup)?;
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let (mut total, mut n, mut failed) = (0.0, 0, 0);
        for s in samples {
            match sample_loss(setup, cfg, &weights, m, s)? {
                Some(l) => {
                    total += l;
                    n += 1;
                }
                None => failed += 1,
            }
        }
        let rmse = if n > 0 { (total / n as f64).sqrt() } else { f64::NAN };
        rows.push(ImitationRow { method: m.name().into(), rmse, evaluated: n, failed });
    }
    Ok(ImitationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapRow {
    pub track: String,
    pub method: String,
    pub stats: LapStats,
}

/// Lap times and per-step times of the short, long and learned controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapComparison {
    pub short_horizon: usize,
    pub long_horizon: usize,
    pub rows: Vec<LapRow>,
}

impl LapComparison {
    pub const HEADER: &'static str =
        "track,method,runs,completed,mean_lap_s,std_lap_s,mean_step_ms,std_step_ms,median_step_ms,max_abs_d,inputs_in_bounds,reduction_pct";

    pub fn get(&self, track: &str, method: &str) -> Option<&LapStats> {
        self.rows.iter().find(|r| r.track == track && r.method == method).map(|r| &r.stats)
    }

    /// `(1 - t_zip / t_long) * 100` using mean per-step time.
    pub fn reduction_pct(&self, track: &str) -> Option<f64> {
        let z = self.get(track, "zipmpc")?.step_time().0;
        let l = self.get(track, "mpc_long")?.step_time().0;
        Some((1.0 - z / l) * 100.0)
    }

    pub fn incomplete(&self) -> bool {
        self.rows.iter().any(|r| !r.stats.all_completed())
    }

    pub fn tracks(&self) -> Vec<String> {
        let mut t: Vec<String> = Vec::new();
        for r in &self.rows {
            if !t.contains(&r.track) {
                t.push(r.track.clone());
            }
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let lap = r.stats.lap();
            let (m, s) = r.stats.step_time();
            let red = if r.method == "zipmpc" { self.reduction_pct(&r.track) } else { None };
            out += &format!(
                "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{},{}\n",
                r.track,
                r.method,
                r.stats.runs.len(),
                r.stats.completed(),
                fmt_opt(lap.map(|l| l.0), 3),
                fmt_opt(lap.map(|l| l.1), 3),
                m * 1e3,
                s * 1e3,
                r.stats.median_step_time() * 1e3,
                r.stats.max_abs_d(),
                r.stats.inputs_in_bounds(),
                fmt_opt(red, 1)
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv())
    }
}

impl fmt::Display for LapComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

/// Races `MPC_{N_S}`, `MPC_{N_L}` and `zip` on every track from `starts`.
/// With `out`, the first run of every controller is written as a trajectory CSV.
pub fn compare_laps(
    zip: &ZipMpc,
    tracks: &[(String, Arc<TrackModel>)],
    starts: &[VehicleState],
    lap_steps: usize,
    out: Option<&Path>,
) -> Result<LapComparison> {
    let mut rows = Vec::new();
    for (name, track) in tracks {
        let setup = zip.setup.with_track(track.clone());
        let mut short = setup.mpc(zip.short_horizon)?;
        let mut long = setup.mpc(zip.long_horizon)?;
        let mut learned = zip.on_track(track.clone())?;
        let policies: [(&str, &mut dyn Policy); 3] =
            [("mpc_short", &mut short), ("mpc_long", &mut long), ("zipmpc", &mut learned)];
        for (method, pol) in policies {
            let (stats, laps) = run_many(&setup.model, track, pol, starts, lap_steps);
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                laps[0].write_csv(track, dir.join(format!("{name}_{method}.csv")))?;
            }
            rows.push(LapRow { track: name.clone(), method: method.into(), stats });
        }
    }
    Ok(LapComparison { short_horizon: zip.short_horizon, long_horizon: zip.long_horizon, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub mean_iterations: f64,
    pub not_converged: usize,
}

/// Per-solve wall clock over a fixed set of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub short_horizon: usize,
    pub long_horizon: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub const HEADER: &'static str = "method,mean_ms,std_ms,median_ms,mean_iterations,not_converged";

    pub fn get(&self, method: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `t(zipmpc) / t(mpc_short)` on mean times.
    pub fn short_ratio(&self) -> f64 {
        self.get("zipmpc").unwrap().mean_ms / self.get("mpc_short").unwrap().mean_ms
    }

    /// `(1 - t(zipmpc) / t(mpc_long)) * 100` on mean times.
    pub fn reduction_pct(&self) -> f64 {
        (1.0 - self.get("zipmpc").unwrap().mean_ms / self.get("mpc_long").unwrap().mean_ms) * 100.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out += &format!(
                "{},{:.4},{:.4},{:.4},{:.2},{}\n",
                r.method, r.mean_ms, r.std_ms, r.median_ms, r.mean_iterations, r.not_converged
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv())
    }
}

impl fmt::Display for TimingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_csv())?;
        write!(f, "zipmpc/mpc_short {:.3}, reduction vs mpc_long {:.1}%", self.short_ratio(), self.reduction_pct())
    }
}

/// Times one solve per state and controller, `repeats` passes. Controllers
/// alternate state by state so background load hits all of them alike. The
/// ZipMPC time includes context extraction and network inference.
pub fn execution_times(zip: &ZipMpc, states: &[VehicleState], repeats: usize) -> Result<TimingTable> {
    let setup = &zip.setup;
    let short = setup.problem(zip.short_horizon)?;
    let long = setup.problem(zip.long_horizon)?;
    let mut times = [vec![], vec![], vec![]];
    let mut iters = [0usize; 3];
    let mut failed = [0usize; 3];
    for _ in 0..repeats.max(1) {
        for x in states {
            for k in 0..3 {
                let t0 = Instant::now();
                let rec = match k {
                    0 => setup.cold_solve(&short, x),
                    1 => {
                        let prob = setup.problem_with(zip.cost_at(x)?)?;
                        setup.cold_solve(&prob, x)
                    }
                    _ => setup.cold_solve(&long, x),
                };
                times[k].push(t0.elapsed().as_secs_f64() * 1e3);
                match rec {
                    Ok(r) => {
                        iters[k] += r.iterations;
                        failed[k] += usize::from(!r.converged);
                    }
                    Err(_) => failed[k] += 1,
                }
            }
        }
    }
    let rows = ["mpc_short", "zipmpc", "mpc_long"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (m, s) = mean_std(&times[k]);
            TimingRow {
                method: name.to_string(),
                mean_ms: m,
                std_ms: s,
                median_ms: median(&times[k]),
                mean_iterations: iters[k] as f64 / times[k].len() as f64,
                not_converged: failed[k],
            }
        })
        .collect();
    Ok(TimingTable { short_horizon: zip.short_horizon, long_horizon: zip.long_horizon, rows })
}

/// Learned cost along a lap next to the curvature ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterTrace {
    pub s: Vec<f64>,
    pub p_d: Vec<f64>,
    pub q_d: Vec<f64>,
    pub mean_curvature: Vec<f64>,
}

impl ParameterTrace {
    pub const HEADER: &'static str = "step,s,p_d,q_d,mean_kappa";

    /// Stage-0 `d` entries recorded by `zip` during its last lap.
    pub fn from_zip(zip: &ZipMpc) -> Self {
        let t = &zip.trace;
        Self {
            s: t.iter().map(|r| r.s).collect(),
            p_d: t.iter().map(|r| r.p0[1]).collect(),
            q_d: t.iter().map(|r| r.q0[1]).collect(),
            mean_curvature: t.iter().map(|r| r.mean_curvature).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn correlation(&self) -> Option<f64> {
        pearson(&self.p_d, &self.mean_curvature)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for i in 0..self.len() {
            out += &format!(
                "{i},{:.6},{:.8},{:.8},{:.8}\n",
                self.s[i], self.p_d[i], self.q_d[i], self.mean_curvature[i]
            );
        }
        out
    }
}

/// Runs `zip` for one lap from `x0` and returns the lap with its parameter trace.
pub fn trace_lap(zip: &mut ZipMpc, x0: VehicleState, lap_steps: usize) -> (LapResult, ParameterTrace) {
    zip.reset();
    let model = zip.setup.model;
    let track = zip.setup.track.clone();
    let lap = run_lap(&model, &track, zip, x0, lap_steps);
    let trace = ParameterTrace::from_zip(zip);
    (lap, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub track: String,
    pub lap_time: Option<f64>,
    pub steps: usize,
    pub pearson_pd_kappa: Option<f64>,
}

/// Names of the files [`export_plot_data`] writes per track.
pub fn plot_files(track: &str) -> [String; 5] {
    [
        format!("{track}_centerline.csv"),
        format!("{track}_zipmpc.csv"),
        format!("{track}_mpc_short.csv"),
        format!("{track}_mpc_long.csv"),
        format!("{track}_trace.csv"),
    ]
}

/// Loads `run_dir/best.bin`, races it and both manual controllers on the
/// training and test tracks, and writes Cartesian trajectories, track
/// outlines and parameter traces into `run_dir/plots`.
pub fn export_plot_data(run_dir: &Path, cfg: &Config) -> Result<Vec<PlotSummary>> {
    let ckpt = run_dir.join("best.bin");
    if !ckpt.is_file() {
        return Err(Error::MissingArtifact(ckpt));
    }
    let setup = cfg.setup()?;
    let zip = load_controller(&setup, &ckpt)?;
    let mut tracks = vec![(cfg.track_label(), setup.track.clone())];
    tracks.extend(cfg.test_tracks()?);
    let dir = run_dir.join("plots");
    std::fs::create_dir_all(&dir)?;
    let x0 = cfg.start_state();
    let steps = cfg.experiment.lap_steps;
    let mut summary = Vec::new();
    for (name, track) in &tracks {
        let files = plot_files(name);
        write_atomic(&dir.join(&files[0]), &centerline_csv(track))?;
        let mut z = zip.on_track(track.clone())?;
        let (lap, trace) = trace_lap(&mut z, x0, steps);
        lap.write_csv(track, dir.join(&files[1]))?;
        let local = setup.with_track(track.clone());
        for (n, file) in [(zip.short_horizon, &files[2]), (zip.long_horizon, &files[3])] {
            let mut pol: MpcPolicy = local.mpc(n)?;
            run_lap(&local.model, track, &mut pol, x0, steps).write_csv(track, dir.join(file))?;
        }
        write_atomic(&dir.join(&files[4]), &trace.to_csv())?;
        summary.push(PlotSummary {
            track: name.clone(),
            lap_time: lap.lap_time,
            steps: lap.steps.len(),
            pearson_pd_kappa: trace.correlation(),
        });
    }
    write_atomic(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Centre line and both borders, one row per grid point.
pub fn centerline_csv(track: &TrackModel) -> String {
    let mut out = String::from("s,x,y,heading,kappa,left_x,left_y,right_x,right_y\n");
    let n = (track.total_length() / track.spacing()).round() as usize;
    let w = track.half_width();
    for k in 0..=n {
        let s = (k as f64 * track.spacing()).min(track.total_length());
        let c = track.centerline(s);
        let l = track.frenet_to_cartesian_unbounded(s, w, 0.0);
        let r = track.frenet_to_cartesian_unbounded(s, -w, 0.0);
        out += &format!(
            "{s:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            c.x,
            c.y,
            c.heading,
            track.curvature(s),
            l.x,
            l.y,
            r.x,
            r.y
        );
    }
    out
}

/// Path of the checkpoint for a run directory.
pub fn checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("best.bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costnet::CostNet;

    #[test]
    fn mean_std_and_median() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn noise_is_reproducible_and_zero_noise_is_exact() {
        let base = VehicleState::kinematic(0.0, 0.0, 0.0, 1.0);
        let a = noisy_starts(ModelKind::Kinematic, &base, 0.01, 10, 3).unwrap();
        assert_eq!(a, noisy_starts(ModelKind::Kinematic, &base, 0.01, 10, 3).unwrap());
        assert!(a.iter().all(|x| x.s() == 0.0));
        assert!(a.iter().any(|x| x.d() != 0.0));
        assert_eq!(noisy_starts(ModelKind::Kinematic, &base, 0.0, 3, 3).unwrap(), vec![base; 3]);
    }

    #[test]
    fn single_horizon_gives_single_row() {
        let setup = Setup::kinematic("train").unwrap();
        let x0 = VehicleState::kinematic(0.0, 0.0, 0.0, 1.0);
        let t = horizon_study(&setup, &[8], &[x0], 2000).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.to_csv().lines().count(), 2);
        assert!(!t.incomplete());
    }

    #[test]
    fn unfinished_runs_are_dashes() {
        let setup = Setup::kinematic("train").unwrap();
        let x0 = VehicleState::kinematic(0.0, 0.0, 0.0, 1.0);
        let t = horizon_study(&setup, &[8], &[x0], 20).unwrap();
        assert!(t.incomplete());
        let row = t.to_csv().lines().nth(1).unwrap().to_string();
        assert!(row.starts_with("8,1,0,-,-,"), "{row}");
    }

    #[test]
    fn long_controller_against_itself_is_zero() {
        let setup = Setup::kinematic("train").unwrap();
        let cfg = TrainConfig::default();
        let samples = validation_set(&setup, &cfg, 5, 1).unwrap();
        let zip = ZipMpc::new(setup.clone(), 5, 18, CostNet::new(setup.net_config(5, 18), 0).unwrap()).unwrap();
        let t = evaluate_imitation(&setup, &cfg, &samples, &[Method::LongManual, Method::ShortManual, Method::Zip(&zip)])
            .unwrap();
        assert_eq!(t.get("mpc_long").unwrap().rmse, 0.0);
        // a zero head reproduces the manual short controller exactly
        assert_eq!(t.get("zipmpc").unwrap().rmse, t.get("mpc_short").unwrap().rmse);
        assert!(t.get("mpc_short").unwrap().rmse > 0.0);
    }

    #[test]
    fn export_requires_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = export_plot_data(dir.path(), &Config::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
