//! Learning a context-dependent cost for a short-horizon MPC that imitates a
//! long-horizon one.
//!
//! The short controller uses `C = C_manual + dC(x, Z)` where `dC` comes from a
//! [`CostNet`] fed with `(v, d, phi)` and the upcoming curvature `Z`. Training
//! samples feasible states, solves both controllers, compares the first few
//! steps of their predictions and pushes the loss gradient through the short
//! solver ([`crate::diffmpc`]) into the network.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costnet::{CostNet, Mode, NetConfig, NetInput};
use crate::diffmpc::{backward, TrajectoryGradient};
use crate::dynamics::{ControlInput, ModelKind, VehicleModel, VehicleState};
use crate::error::{Error, Result};
use crate::solver::cost::Q_MIN;
use crate::solver::{
    racing_problem, run_lap, solve, CostSchedule, ManualCost, MpcPolicy, MpcProblem, Policy, RacingSettings,
    RacingSystem, SolveRecord, SolverOptions,
};
use crate::track::{context_len, TrackModel};

/// Vehicle, track and solver settings shared by every controller of an experiment.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: VehicleModel,
    pub track: Arc<TrackModel>,
    pub settings: RacingSettings,
    pub options: SolverOptions,
    /// Overrides the built-in manual cost for the model kind.
    pub manual: Option<ManualCost>,
}

impl Setup {
    pub fn new(model: VehicleModel, track: Arc<TrackModel>) -> Self {
        Self { model, track, settings: RacingSettings::default(), options: SolverOptions::default(), manual: None }
    }

    pub fn kinematic(track_name: &str) -> Result<Self> {
        Ok(Self::new(VehicleModel::kinematic(), Arc::new(TrackModel::bundled(track_name)?)))
    }

    pub fn with_track(&self, track: Arc<TrackModel>) -> Self {
        Self { track, ..self.clone() }
    }

    pub fn manual_cost(&self, horizon: usize) -> ManualCost {
        self.manual.clone().unwrap_or_else(|| ManualCost::for_kind(self.model.kind, horizon))
    }

    pub fn problem(&self, horizon: usize) -> Result<MpcProblem<RacingSystem>> {
        self.problem_with(self.manual_cost(horizon).expand(horizon))
    }

    pub fn problem_with(&self, cost: CostSchedule) -> Result<MpcProblem<RacingSystem>> {
        racing_problem(self.model, self.track.clone(), cost, &self.settings, self.options)
    }

    pub fn mpc(&self, horizon: usize) -> Result<MpcPolicy> {
        Ok(MpcPolicy::new(self.problem(horizon)?))
    }

    pub fn dim(&self) -> usize {
        self.model.kind.state_dim() + 2 + self.model.kind.input_dim()
    }

    /// Cost entries the network never corrects: `s` and `s0`.
    pub fn frozen_entries(&self) -> Vec<bool> {
        let mut f = vec![false; self.dim()];
        f[0] = true;
        f[self.model.kind.state_dim()] = true;
        f
    }

    pub fn context_len(&self, long_horizon: usize) -> usize {
        let p = &self.model.params;
        context_len(long_horizon, p.dt, p.v_max, self.track.spacing())
    }

    pub fn context(&self, s: f64, long_horizon: usize) -> Vec<f64> {
        let p = &self.model.params;
        self.track.extract_context(s, long_horizon, p.dt, p.v_max).values
    }

    /// Solves from `x` without a previous solution, seeding the inputs with
    /// the curvature feed-forward guess.
    pub fn cold_solve(&self, prob: &MpcProblem<RacingSystem>, x: &VehicleState) -> Result<SolveRecord> {
        let z0 = prob.system.augment(&x.with_s(self.track.wrap(x.s())));
        let guess = prob.system.initial_guess(&z0, prob.horizon);
        solve(prob, &z0, Some(&guess))
    }

    /// Default loss weights: `1 / range^2` on the lateral, heading, speed and
    /// input entries, zero on the progress entries.
    pub fn default_loss_weights(&self) -> DVector<f64> {
        let p = &self.model.params;
        let n = self.model.kind.state_dim();
        let mut w = DVector::zeros(self.dim());
        let inv2 = |r: f64| 1.0 / (r * r);
        w[1] = inv2(p.half_width);
        w[2] = inv2(0.4);
        match self.model.kind {
            ModelKind::Kinematic => w[3] = inv2(p.v_max),
            ModelKind::PacejkaSim | ModelKind::PacejkaHardware => {
                w[3] = inv2(2.0 * std::f64::consts::PI);
                w[4] = inv2(p.v_max);
                w[5] = inv2(0.1 * p.v_max);
            }
        }
        let (lo, hi) = self.model.input_bounds();
        w[n + 2] = inv2(hi[0] - lo[0]);
        w[n + 3] = inv2(hi[1] - lo[1]);
        w
    }

    /// Network configuration matching this setup.
    pub fn net_config(&self, short_horizon: usize, long_horizon: usize) -> NetConfig {
        NetConfig::new(self.context_len(long_horizon), short_horizon, &self.manual_cost(short_horizon).q, self.frozen_entries())
    }
}

/// Network input for a vehicle state.
pub fn state_features(x: &VehicleState) -> [f64; 3] {
    [x.speed(), x.d(), x.phi()]
}

/// `C_manual + delta`, with learnable `q` floored at `q_min`. The returned
/// mask marks `q` entries where the floor is inactive (gradient passes).
pub fn compose(manual: &CostSchedule, delta: &CostSchedule, frozen: &[bool]) -> (CostSchedule, Vec<Vec<bool>>) {
    let mut cost = manual.add(delta);
    let mut pass = vec![vec![true; manual.dim()]; manual.stages()];
    for i in 0..cost.stages() {
        for j in 0..cost.dim() {
            if frozen[j] {
                cost.q[i][j] = manual.q[i][j];
                cost.p[i][j] = manual.p[i][j];
                pass[i][j] = false;
            } else if cost.q[i][j] < Q_MIN {
                cost.q[i][j] = Q_MIN;
                pass[i][j] = false;
            }
        }
    }
    (cost, pass)
}

/// Weighted squared error over the first `nd` stage vectors, divided by `nd`.
/// Returns the value and its gradient with respect to `short`.
pub fn imitation_loss_stages(
    short: &[DVector<f64>],
    long: &[DVector<f64>],
    nd: usize,
    weights: &DVector<f64>,
) -> Result<(f64, Vec<DVector<f64>>)> {
    if nd == 0 || short.len() < nd || long.len() < nd {
        return Err(Error::Dimension(format!(
            "imitation loss needs {nd} stages, got {} and {}",
            short.len(),
            long.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(nd);
    for i in 0..nd {
        if short[i].len() != weights.len() || long[i].len() != weights.len() {
            return Err(Error::Dimension("stage vector length does not match the loss weights".into()));
        }
        let e = &short[i] - &long[i];
        value += e.iter().zip(weights.iter()).map(|(e, w)| w * e * e).sum::<f64>();
        grad.push(e.component_mul(weights) * (2.0 / nd as f64));
    }
    Ok((value / nd as f64, grad))
}

/// [`imitation_loss_stages`] on two solve records, with the gradient laid
/// out for [`crate::diffmpc::backward`].
pub fn imitation_loss(
    short: &SolveRecord,
    long: &SolveRecord,
    nd: usize,
    weights: &DVector<f64>,
) -> Result<(f64, TrajectoryGradient)> {
    let zs: Vec<_> = (0..short.inputs.len().min(nd)).map(|i| short.stage_vector(i)).collect();
    let zl: Vec<_> = (0..long.inputs.len().min(nd)).map(|i| long.stage_vector(i)).collect();
    let (value, g) = imitation_loss_stages(&zs, &zl, nd, weights)?;
    let n = short.states[0].len();
    let mut out = TrajectoryGradient::zeros_like(short);
    for (i, gi) in g.iter().enumerate() {
        out.states[i] = gi.rows(0, n).into_owned();
        out.inputs[i] = gi.rows(n, gi.len() - n).into_owned();
    }
    Ok((value, out))
}

/// Region states are drawn from, uniformly per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRanges {
    /// Progress interval; the whole track when absent.
    pub s: Option<[f64; 2]>,
    /// Lateral offset as fractions of `omega_tight`.
    pub d: [f64; 2],
    pub phi: [f64; 2],
    /// Speed; the upper end is capped at the model's `v_max`.
    pub v: [f64; 2],
}

impl Default for SampleRanges {
    fn default() -> Self {
        Self { s: None, d: [-0.8, 0.8], phi: [-0.4, 0.4], v: [0.3, f64::MAX] }
    }
}

impl SampleRanges {
    /// A single state.
    pub fn point(s: f64, d_frac: f64, phi: f64, v: f64) -> Self {
        Self { s: Some([s, s]), d: [d_frac, d_frac], phi: [phi, phi], v: [v, v] }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite();
        let ok = ordered(self.d)
            && ordered(self.phi)
            && ordered(self.v)
            && self.s.map_or(true, ordered)
            && self.d[0] >= -1.0
            && self.d[1] <= 1.0
            && self.v[0] > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampling ranges {self:?}")))
        }
    }
}

/// A feasible state together with the long-horizon solution from it.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub state: VehicleState,
    pub context: Vec<f64>,
    pub long: SolveRecord,
    /// Draws rejected before this one.
    pub rejected: usize,
}

/// Largest soft-constraint violation accepted in a reference solution.
pub const VIOLATION_LIMIT: f64 = 0.02;

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws states uniformly from `ranges` until the long-horizon controller
/// converges with violation below [`VIOLATION_LIMIT`].
pub fn sample_feasible(
    setup: &Setup,
    ranges: &SampleRanges,
    rng: &mut impl Rng,
    long: &MpcProblem<RacingSystem>,
    max_retries: usize,
) -> Result<SampleState> {
    ranges.validate()?;
    let p = &setup.model.params;
    let w = setup.settings.tighten * p.half_width;
    let v_hi = ranges.v[1].min(p.v_max);
    for rejected in 0..max_retries {
        let s = match ranges.s {
            Some([lo, hi]) => uniform(rng, lo, hi),
            None => rng.gen_range(0.0..setup.track.total_length()),
        };
        let d = uniform(rng, ranges.d[0] * w, ranges.d[1] * w);
        let phi = uniform(rng, ranges.phi[0], ranges.phi[1]);
        let v = uniform(rng, ranges.v[0].min(v_hi), v_hi);
        let state = VehicleState::for_kind(setup.model.kind, s, d, phi, v);
        match setup.cold_solve(long, &state) {
            Ok(rec) if rec.converged && rec.max_violation < VIOLATION_LIMIT => {
                return Ok(SampleState { state, context: setup.context(s, long.horizon), long: rec, rejected });
            }
            _ => {}
        }
    }
    Err(Error::SamplingRegion(max_retries))
}

/// The learned short-horizon controller.
#[derive(Debug, Clone)]
pub struct ZipMpc {
    pub setup: Setup,
    pub short_horizon: usize,
    pub long_horizon: usize,
    pub net: CostNet,
    manual: CostSchedule,
    policy: MpcPolicy,
    /// Per step: progress, stage-0 cost, mean upcoming curvature.
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub s: f64,
    pub q0: Vec<f64>,
    pub p0: Vec<f64>,
    pub mean_curvature: f64,
}

impl ZipMpc {
    pub fn new(setup: Setup, short_horizon: usize, long_horizon: usize, net: CostNet) -> Result<Self> {
        let cfg = net.config();
        if cfg.horizon != short_horizon || cfg.dim != setup.dim() {
            return Err(Error::Config(format!(
                "network built for horizon {} / dim {}, controller needs {} / {}",
                cfg.horizon,
                cfg.dim,
                short_horizon,
                setup.dim()
            )));
        }
        if cfg.use_context && cfg.context_len != setup.context_len(long_horizon) {
            return Err(Error::Config("network context length does not match the long horizon".into()));
        }
        let manual = setup.manual_cost(short_horizon).expand(short_horizon);
        let policy = setup.mpc(short_horizon)?;
        Ok(Self { setup, short_horizon, long_horizon, net, manual, policy, trace: Vec::new() })
    }

    /// Same network on another track.
    pub fn on_track(&self, track: Arc<TrackModel>) -> Result<Self> {
        Self::new(self.setup.with_track(track), self.short_horizon, self.long_horizon, self.net.clone())
    }

    /// Cost used at state `x`, plus the net input it was computed from.
    pub fn cost_at(&self, x: &VehicleState) -> Result<CostSchedule> {
        let context = self.setup.context(x.s(), self.long_horizon);
        let delta = self.net.eval(&NetInput { state: state_features(x), context: &context })?;
        Ok(compose(&self.manual, &delta, &self.setup.frozen_entries()).0)
    }

    pub fn last_record(&self) -> Option<&SolveRecord> {
        self.policy.last.as_ref()
    }
}

impl Policy for ZipMpc {
    fn reset(&mut self) {
        self.policy.reset();
        self.trace.clear();
    }

    fn act(&mut self, x: &VehicleState) -> Result<ControlInput> {
        let cost = self.cost_at(x)?;
        let context = self.setup.context(x.s(), self.long_horizon);
        self.trace.push(TraceRow {
            s: self.setup.track.wrap(x.s()),
            q0: cost.q[0].iter().copied().collect(),
            p0: cost.p[0].iter().copied().collect(),
            mean_curvature: context.iter().sum::<f64>() / context.len().max(1) as f64,
        });
        let rec = self.policy.solve_at(x, Some(cost))?;
        Ok(ControlInput::new(rec.inputs[0][0], rec.inputs[0][1]))
    }
}

/// Optional overrides of the network defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NetOverrides {
    pub fc_widths: Option<Vec<usize>>,
    pub use_conv: Option<bool>,
    pub use_context: Option<bool>,
    pub layer_norm: Option<bool>,
    pub dropout: Option<f64>,
    pub p_scale: Option<f64>,
}

impl NetOverrides {
    pub fn apply(&self, cfg: &mut NetConfig) {
        if let Some(w) = &self.fc_widths {
            cfg.fc_widths = w.clone();
        }
        if let Some(v) = self.use_conv {
            cfg.use_conv = v;
        }
        if let Some(v) = self.use_context {
            cfg.use_context = v;
        }
        if let Some(v) = self.layer_norm {
            cfg.layer_norm = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.p_scale {
            cfg.p_scale.iter_mut().for_each(|p| *p = v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub short_horizon: usize,
    pub long_horizon: usize,
    /// Number of leading stages compared by the loss.
    pub loss_horizon: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Defaults to [`Setup::default_loss_weights`].
    pub loss_weights: Option<Vec<f64>>,
    pub ranges: SampleRanges,
    pub max_retries: usize,
    /// Validate (one lap) every this many iterations; 0 disables.
    pub validation_every: usize,
    /// `(s, d, phi, v)` of the validation lap.
    pub validation_state: [f64; 4],
    pub lap_steps: usize,
    pub seed: u64,
    pub net: NetOverrides,
    /// Where to write the JSON-lines log and checkpoints.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            short_horizon: 5,
            long_horizon: 18,
            loss_horizon: 5,
            batch_size: 4,
            iterations: 2000,
            lr: 1e-3,
            loss_weights: None,
            ranges: SampleRanges::default(),
            max_retries: 100,
            validation_every: 100,
            validation_state: [0.0, 0.0, 0.0, 1.0],
            lap_steps: 2000,
            seed: 0,
            net: NetOverrides::default(),
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.loss_horizon && self.loss_horizon <= self.short_horizon && self.short_horizon < self.long_horizon) {
            return Err(Error::Config(format!(
                "need 1 <= N_D ({}) <= N_S ({}) < N_L ({})",
                self.loss_horizon, self.short_horizon, self.long_horizon
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self, setup: &Setup) -> Result<DVector<f64>> {
        match &self.loss_weights {
            Some(w) if w.len() == setup.dim() => Ok(DVector::from_column_slice(w)),
            Some(w) => Err(Error::Config(format!("{} loss weights for a {}-entry cost", w.len(), setup.dim()))),
            None => Ok(setup.default_loss_weights()),
        }
    }

    pub fn validation_start(&self, kind: ModelKind) -> VehicleState {
        let [s, d, phi, v] = self.validation_state;
        VehicleState::for_kind(kind, s, d, phi, v)
    }

    pub fn net_config(&self, setup: &Setup) -> NetConfig {
        let mut cfg = setup.net_config(self.short_horizon, self.long_horizon);
        self.net.apply(&mut cfg);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean loss over the samples used this iteration.
    pub loss: Option<f64>,
    pub used: usize,
    /// Samples whose short-horizon solve did not converge.
    pub skipped: usize,
    /// Draws rejected by the feasibility filter.
    pub rejected: usize,
    pub validation_lap: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network with the best validation lap (or the last one if no lap finished).
    pub best: CostNet,
    pub best_lap: Option<f64>,
    pub best_iteration: usize,
    pub last: CostNet,
    pub log: Vec<LogEntry>,
}

/// Loss and parameter gradient for one sample. `None` if the short solve failed.
pub fn sample_gradient(
    setup: &Setup,
    net: &CostNet,
    manual: &CostSchedule,
    sample: &SampleState,
    nd: usize,
    weights: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<Option<(f64, Vec<f64>)>> {
    let input = NetInput { state: state_features(&sample.state), context: &sample.context };
    let (delta, tape) = net.forward(&input, Mode::Train, rng)?;
    let frozen = setup.frozen_entries();
    let (cost, pass) = compose(manual, &delta, &frozen);
    let prob = setup.problem_with(cost)?;
    let rec = match setup.cold_solve(&prob, &sample.state) {
        Ok(r) if r.converged => r,
        _ => return Ok(None),
    };
    let (value, upstream) = imitation_loss(&rec, &sample.long, nd, weights)?;
    let g = backward(&prob, &rec, &upstream)?;
    let mut up = g.as_schedule();
    for (i, row) in pass.iter().enumerate() {
        for (j, &ok) in row.iter().enumerate() {
            if !ok {
                up.q[i][j] = 0.0;
            }
        }
    }
    let grad = net.backward(&tape, &up)?;
    Ok(Some((value, grad)))
}

/// Runs the training loop. Deterministic for a given configuration.
pub fn train(cfg: &TrainConfig, setup: &Setup) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = cfg.weights(setup)?;
    let long = setup.problem(cfg.long_horizon)?;
    let manual = setup.manual_cost(cfg.short_horizon).expand(cfg.short_horizon);
    let start = cfg.validation_start(setup.model.kind);

    // the reference controller has to be able to race at all
    let mut reference = setup.mpc(cfg.long_horizon)?;
    let ref_lap = run_lap(&setup.model, &setup.track, &mut reference, start, cfg.lap_steps);
    if !ref_lap.completed() {
        return Err(Error::Config(format!(
            "long-horizon reference does not complete a lap: {}",
            ref_lap.failure.map(|f| f.to_string()).unwrap_or_default()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = CostNet::new(cfg.net_config(setup), cfg.seed)?;
    let mut log_file = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let meta = checkpoint_meta(setup, cfg);

    let validate = |net: &CostNet| -> Result<Option<f64>> {
        let mut zip = ZipMpc::new(setup.clone(), cfg.short_horizon, cfg.long_horizon, net.clone())?;
        Ok(run_lap(&setup.model, &setup.track, &mut zip, start, cfg.lap_steps).lap_time)
    };

    let mut best = net.clone();
    let mut best_lap = validate(&net)?;
    let mut best_iteration = 0;
    let mut log = Vec::with_capacity(cfg.iterations + 1);
    let t0 = Instant::now();
    let first = LogEntry {
        iteration: 0,
        loss: None,
        used: 0,
        skipped: 0,
        rejected: 0,
        validation_lap: best_lap,
        seconds: 0.0,
    };
    write_log(&mut log_file, &first)?;
    log.push(first);

    for it in 1..=cfg.iterations {
        let mut total = vec![0.0; net.num_params()];
        let (mut loss, mut used, mut skipped, mut rejected) = (0.0, 0, 0, 0);
        for _ in 0..cfg.batch_size {
            let sample = sample_feasible(setup, &cfg.ranges, &mut rng, &long, cfg.max_retries)?;
            rejected += sample.rejected;
            match sample_gradient(setup, &net, &manual, &sample, cfg.loss_horizon, &weights, &mut rng)? {
                Some((v, g)) => {
                    loss += v;
                    used += 1;
                    total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                }
                None => skipped += 1,
            }
        }
        if used > 0 {
            total.iter_mut().for_each(|t| *t /= used as f64);
            net.adam_step(&total, cfg.lr)?;
        }
        let mut entry = LogEntry {
            iteration: it,
            loss: (used > 0).then(|| loss / used as f64),
            used,
            skipped,
            rejected,
            validation_lap: None,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if cfg.validation_every > 0 && (it % cfg.validation_every == 0 || it == cfg.iterations) {
            let lap = validate(&net)?;
            entry.validation_lap = lap;
            if let Some(t) = lap {
                if best_lap.map_or(true, |b| t < b) {
                    best_lap = Some(t);
                    best = net.clone();
                    best_iteration = it;
                    if let Some(dir) = &cfg.output_dir {
                        best.save(dir.join("best.bin"), &meta)?;
                    }
                }
            }
        }
        write_log(&mut log_file, &entry)?;
        log.push(entry);
    }
    if let Some(dir) = &cfg.output_dir {
        net.save(dir.join("last.bin"), &meta)?;
        if best_iteration == 0 {
            best.save(dir.join("best.bin"), &meta)?;
        }
    }
    Ok(TrainOutcome { best, best_lap, best_iteration, last: net, log })
}

fn write_log(file: &mut Option<std::io::BufWriter<std::fs::File>>, entry: &LogEntry) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{}", serde_json::to_string(entry)?)?;
        f.flush()?;
    }
    Ok(())
}

/// Metadata stored next to the parameters in checkpoints.
pub fn checkpoint_meta(setup: &Setup, cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("model".into(), format!("{:?}", setup.model.kind));
    m.insert("short_horizon".into(), cfg.short_horizon.to_string());
    m.insert("long_horizon".into(), cfg.long_horizon.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m
}

/// Reads the horizons back from checkpoint metadata.
pub fn horizons_from_meta(meta: &BTreeMap<String, String>) -> Result<(usize, usize)> {
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks '{k}'")))
    };
    Ok((get("short_horizon")?, get("long_horizon")?))
}

/// Behaviour clone of the long-horizon controller: the network's single-stage
/// `p` block, squashed into the input box, is read directly as the input.
#[derive(Debug, Clone)]
pub struct EmpcClone {
    pub setup: Setup,
    pub long_horizon: usize,
    pub net: CostNet,
}

impl EmpcClone {
    pub fn config(setup: &Setup, long_horizon: usize, overrides: &NetOverrides) -> NetConfig {
        let (lo, hi) = setup.model.input_bounds();
        let mut cfg = NetConfig::new(setup.context_len(long_horizon), 0, &DVector::zeros(2), vec![false, false]);
        overrides.apply(&mut cfg);
        cfg.p_scale = vec![hi[0].min(-lo[0]), hi[1].min(-lo[1])];
        cfg
    }

    pub fn input(&self, x: &VehicleState) -> Result<ControlInput> {
        let context = self.setup.context(x.s(), self.long_horizon);
        let out = self.net.eval(&NetInput { state: state_features(x), context: &context })?;
        Ok(ControlInput::new(out.p[0][0], out.p[0][1]))
    }
}

impl Policy for EmpcClone {
    fn reset(&mut self) {}

    fn act(&mut self, x: &VehicleState) -> Result<ControlInput> {
        self.input(x)
    }
}

#[derive(Debug, Clone)]
pub struct CloneOutcome {
    pub policy: EmpcClone,
    /// Mean squared (bound-normalized) input error on the training set, per epoch.
    pub train_mse: Vec<f64>,
}

/// Fits an [`EmpcClone`] to `u_0` of the long-horizon controller on
/// `samples` feasible states, `epochs` passes of mini-batch Adam.
pub fn train_empc_baseline(
    cfg: &TrainConfig,
    setup: &Setup,
    samples: usize,
    epochs: usize,
) -> Result<CloneOutcome> {
    cfg.validate()?;
    let long = setup.problem(cfg.long_horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc10e);
    let data: Vec<SampleState> = (0..samples)
        .map(|_| sample_feasible(setup, &cfg.ranges, &mut rng, &long, cfg.max_retries))
        .collect::<Result<_>>()?;
    let ncfg = EmpcClone::config(setup, cfg.long_horizon, &cfg.net);
    let scale = ncfg.p_scale.clone();
    let mut net = CostNet::new(ncfg, cfg.seed)?;
    let mut train_mse = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1) * 4) {
            let mut total = vec![0.0; net.num_params()];
            for &k in chunk {
                let s = &data[k];
                let input = NetInput { state: state_features(&s.state), context: &s.context };
                let (out, tape) = net.forward(&input, Mode::Train, &mut rng)?;
                let mut up = out.zeros_like();
                for j in 0..2 {
                    let e = (out.p[0][j] - s.long.inputs[0][j]) / scale[j];
                    epoch_loss += e * e;
                    up.p[0][j] = 2.0 * e / scale[j] / chunk.len() as f64;
                }
                let g = net.backward(&tape, &up)?;
                total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
            }
            net.adam_step(&total, cfg.lr)?;
        }
        train_mse.push(epoch_loss / (2 * data.len()) as f64);
    }
    Ok(CloneOutcome { policy: EmpcClone { setup: setup.clone(), long_horizon: cfg.long_horizon, net }, train_mse })
}

/// A horizon-constant correction applied to every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantDelta {
    pub dq: DVector<f64>,
    pub dp: DVector<f64>,
}

impl ConstantDelta {
    pub fn zeros(dim: usize) -> Self {
        Self { dq: DVector::zeros(dim), dp: DVector::zeros(dim) }
    }

    pub fn schedule(&self, horizon: usize) -> CostSchedule {
        CostSchedule::expand(&self.dq, &self.dp, horizon)
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: ConstantDelta,
    pub best_loss: f64,
    pub manual_loss: f64,
    pub evaluated: usize,
}

/// Mean imitation loss of the short controller with cost `cost` over `samples`.
/// Samples whose short solve fails count with the loss of the manual cost
/// replaced by `penalty`.
pub fn mean_loss(
    setup: &Setup,
    cost: &CostSchedule,
    samples: &[SampleState],
    nd: usize,
    weights: &DVector<f64>,
) -> Result<(f64, usize)> {
    let prob = setup.problem_with(cost.clone())?;
    let (mut total, mut failed) = (0.0, 0);
    for s in samples {
        match setup.cold_solve(&prob, &s.state) {
            Ok(rec) if rec.converged => total += imitation_loss(&rec, &s.long, nd, weights)?.0,
            _ => failed += 1,
        }
    }
    let used = samples.len() - failed;
    Ok((if used > 0 { total / used as f64 } else { f64::INFINITY }, failed))
}

/// Random search over a constant correction: `dq_j` uniform in
/// `[-q_j, q_j]` and `dp_j` uniform in `[-p_range, p_range]` on learnable
/// entries. The zero correction is always the first candidate. Candidates
/// where any short solve fails are discarded.
pub fn search_constant_delta(
    cfg: &TrainConfig,
    setup: &Setup,
    samples: &[SampleState],
    budget: usize,
    p_range: f64,
) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let weights = cfg.weights(setup)?;
    let manual_q = setup.manual_cost(cfg.short_horizon);
    let manual = manual_q.expand(cfg.short_horizon);
    let frozen = setup.frozen_entries();
    let dim = setup.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb0);
    let (manual_loss, _) = mean_loss(setup, &manual, samples, cfg.loss_horizon, &weights)?;
    let mut best = ConstantDelta::zeros(dim);
    let mut best_loss = manual_loss;
    for _ in 1..budget {
        let mut cand = ConstantDelta::zeros(dim);
        for j in (0..dim).filter(|&j| !frozen[j]) {
            cand.dq[j] = uniform(&mut rng, -manual_q.q[j], manual_q.q[j]);
            cand.dp[j] = uniform(&mut rng, -p_range, p_range);
        }
        let (cost, _) = compose(&manual, &cand.schedule(cfg.short_horizon), &frozen);
        let (loss, failed) = mean_loss(setup, &cost, samples, cfg.loss_horizon, &weights)?;
        if failed == 0 && loss < best_loss {
            best_loss = loss;
            best = cand;
        }
    }
    Ok(SearchOutcome { best, best_loss, manual_loss, evaluated: budget })
}

/// Pearson correlation coefficient; `None` for fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Writes a checkpoint plus the metadata needed to rebuild the controller.
pub fn save_controller(zip: &ZipMpc, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("model".into(), format!("{:?}", zip.setup.model.kind));
    meta.insert("short_horizon".into(), zip.short_horizon.to_string());
    meta.insert("long_horizon".into(), zip.long_horizon.to_string());
    zip.net.save(path, &meta)
}

/// Loads a checkpoint written by [`train`] or [`save_controller`].
pub fn load_controller(setup: &Setup, path: impl AsRef<Path>) -> Result<ZipMpc> {
    let (net, meta) = CostNet::load(path)?;
    if let Some(m) = meta.get("model") {
        if *m != format!("{:?}", setup.model.kind) {
            return Err(Error::Checkpoint(format!("checkpoint is for the {m} model")));
        }
    }
    let (ns, nl) = horizons_from_meta(&meta)?;
    ZipMpc::new(setup.clone(), ns, nl, net)
}
