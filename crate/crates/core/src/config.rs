//! Experiment configuration file.
//!
//! ```toml
//! [track]
//! name = "train"            # bundled name, or set `file`
//! tests = ["test1", "test2"]
//!
//! [model]
//! kind = "kinematic"
//!
//! [solver]
//! max_iter = 50
//!
//! [net]
//! fc_widths = [64, 64]
//!
//! [training]
//! short_horizon = 5
//! long_horizon = 18
//!
//! [experiment]
//! horizons = [5, 10, 15, 25]
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelKind, ModelParams, VehicleModel, VehicleState};
use crate::error::{Error, Result};
use crate::solver::{ManualCost, RacingSettings, SolverOptions};
use crate::track::TrackModel;
use crate::zipmpc::{NetOverrides, Setup, TrainConfig};

/// Overrides the directory outputs are written under.
pub const OUTPUT_ROOT_ENV: &str = "ZIPMPC_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub name: String,
    /// Track description file; takes precedence over `name`.
    pub file: Option<PathBuf>,
    /// Unseen tracks used for generalization runs (bundled names or paths).
    pub tests: Vec<String>,
}

impl Default for TrackSection {
    fn default() -> Self {
        Self { name: "train".into(), file: None, tests: vec!["test1".into(), "test2".into()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Replaces the default parameters of `kind` when given.
    pub params: Option<ModelParams>,
    pub tighten: f64,
    pub penalty_weight: f64,
    /// Manual cost vectors over `[x, s0, s_delta, u]`; built-in values when absent.
    pub manual_q: Option<Vec<f64>>,
    pub manual_p: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = RacingSettings::default();
        Self {
            kind: ModelKind::Kinematic,
            params: None,
            tighten: r.tighten,
            penalty_weight: r.penalty_weight,
            manual_q: None,
            manual_p: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub horizons: Vec<usize>,
    pub repetitions: usize,
    /// Standard deviation of the Gaussian noise on the initial `(d, phi, v)`.
    pub noise: f64,
    /// `(s, d, phi, v)` lap start before noise.
    pub start: [f64; 4],
    pub lap_steps: usize,
    pub validation_states: usize,
    pub search_budget: usize,
    pub search_samples: usize,
    pub clone_samples: usize,
    pub clone_epochs: usize,
    pub seed: u64,
    /// Relative to the output root unless absolute.
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            horizons: vec![5, 10, 15, 20, 25, 30],
            repetitions: 10,
            noise: 0.01,
            start: [0.0, 0.0, 0.0, 1.0],
            lap_steps: 2000,
            validation_states: 1000,
            search_budget: 50,
            search_samples: 100,
            clone_samples: 2000,
            clone_epochs: 30,
            seed: 7,
            output_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub track: TrackSection,
    pub model: ModelSection,
    pub solver: SolverOptions,
    pub net: NetOverrides,
    pub training: TrainConfig,
    pub experiment: ExperimentSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.experiment.horizons.is_empty() || self.experiment.horizons.contains(&0) {
            return Err(Error::Config("experiment.horizons must be non-empty and positive".into()));
        }
        if self.experiment.repetitions == 0 {
            return Err(Error::Config("experiment.repetitions must be at least 1".into()));
        }
        if !(self.experiment.noise >= 0.0) {
            return Err(Error::Config("experiment.noise must be non-negative".into()));
        }
        if self.model.manual_q.is_some() != self.model.manual_p.is_some() {
            return Err(Error::Config("model.manual_q and model.manual_p must be given together".into()));
        }
        if let Some(f) = &self.track.file {
            if !f.exists() {
                return Err(Error::Config(format!("track file {} does not exist", f.display())));
            }
        }
        self.model_def().params.validate()
    }

    pub fn model_def(&self) -> VehicleModel {
        VehicleModel::new(self.model.kind, self.model.params.unwrap_or_else(|| ModelParams::for_kind(self.model.kind)))
    }

    pub fn load_track(&self) -> Result<Arc<TrackModel>> {
        Ok(Arc::new(match &self.track.file {
            Some(f) => TrackModel::from_file(f)?,
            None => TrackModel::bundled(&self.track.name)?,
        }))
    }

    /// The unseen tracks with display names.
    pub fn test_tracks(&self) -> Result<Vec<(String, Arc<TrackModel>)>> {
        self.track.tests.iter().map(|t| Ok((t.clone(), Arc::new(resolve_track(t)?)))).collect()
    }

    pub fn track_label(&self) -> String {
        match &self.track.file {
            Some(f) => f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "track".into()),
            None => self.track.name.clone(),
        }
    }

    pub fn setup(&self) -> Result<Setup> {
        let mut setup = Setup::new(self.model_def(), self.load_track()?);
        setup.settings = RacingSettings { tighten: self.model.tighten, penalty_weight: self.model.penalty_weight };
        setup.options = self.solver;
        if let (Some(q), Some(p)) = (&self.model.manual_q, &self.model.manual_p) {
            if q.len() != setup.dim() || p.len() != setup.dim() {
                return Err(Error::Config(format!("manual cost vectors need {} entries", setup.dim())));
            }
            setup.manual = Some(ManualCost { q: q.clone().into(), p: p.clone().into() });
        }
        Ok(setup)
    }

    /// Training settings with the `[net]` section applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { net: self.net.clone(), ..self.training.clone() }
    }

    pub fn start_state(&self) -> VehicleState {
        let [s, d, phi, v] = self.experiment.start;
        VehicleState::for_kind(self.model.kind, s, d, phi, v)
    }

    /// `experiment.output_dir` resolved against the output root.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.experiment.output_dir)
    }
}

/// Bundled track name or path to a track file.
pub fn resolve_track(name: &str) -> Result<TrackModel> {
    match TrackModel::bundled(name) {
        Ok(t) => Ok(t),
        Err(_) if Path::new(name).exists() => TrackModel::from_file(name),
        Err(e) => Err(e),
    }
}

/// Joins relative paths onto `$ZIPMPC_OUTPUT_ROOT` (default `./runs`).
pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(dir)
}
