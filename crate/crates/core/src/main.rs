use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zipmpc::config::{resolve_track, Config, OUTPUT_ROOT_ENV};
use zipmpc::costnet::write_info;
use zipmpc::diffmpc::{gradcheck, LossSpec};
use zipmpc::experiment::{
    checkpoint_path, compare_laps, evaluate_imitation, execution_times, export_plot_data, horizon_study,
    noisy_starts, validation_set, Method,
};
use zipmpc::zipmpc::{
    load_controller, sample_feasible, search_constant_delta, train, train_empc_baseline, ConstantDelta,
};
use zipmpc::{Error, Result};

#[derive(Parser)]
#[command(name = "zipmpc", about = "Learned short-horizon MPC for autonomous racing")]
struct Cli {
    /// TOML configuration; defaults are used when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `experiment.output_dir` under $ZIPMPC_OUTPUT_ROOT.
    #[arg(short, long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track utilities.
    Track {
        #[command(subcommand)]
        action: TrackAction,
    },
    /// Train the cost network and write checkpoints into the run directory.
    Train,
    /// Lap time of the manual controller against horizon length.
    HorizonStudy,
    /// Imitation RMSE of every method against the long-horizon controller.
    EvaluateImitation {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip the behaviour-cloning baseline.
        #[arg(long)]
        no_clone: bool,
    },
    /// Lap times and per-step execution time on the training and test tracks.
    CompareLaps {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic cost gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        /// Largest finite-difference step; it is halved adaptively.
        #[arg(long, default_value_t = 1e-2)]
        step: f64,
        /// Check a random subset of this many weights per instance.
        #[arg(long)]
        entries: Option<usize>,
    },
    /// Trajectories, track outlines and learned-parameter traces for plotting.
    ExportPlots,
    /// Checkpoint inspection.
    Costnet {
        #[command(subcommand)]
        action: CostnetAction,
    },
}

#[derive(Subcommand)]
enum TrackAction {
    /// Closure and singularity diagnostics for tracks (configured ones by default).
    Check { tracks: Vec<String> },
}

#[derive(Subcommand)]
enum CostnetAction {
    /// Print the architecture and metadata stored in a checkpoint.
    Info { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("experiment incomplete: at least one run did not finish a lap");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// `Ok(false)` means the experiment ran but is incomplete.
fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| cfg.output_dir());
    match cli.command {
        Command::Track { action: TrackAction::Check { tracks } } => track_check(&cfg, &tracks),
        Command::Train => cmd_train(&cfg, &run_dir),
        Command::HorizonStudy => {
            let setup = cfg.setup()?;
            let e = &cfg.experiment;
            let starts = noisy_starts(cfg.model.kind, &cfg.start_state(), e.noise, e.repetitions, e.seed)?;
            let table = horizon_study(&setup, &e.horizons, &starts, e.lap_steps)?;
            table.save(run_dir.join("horizon_study.csv"))?;
            print!("{table}");
            Ok(!table.incomplete())
        }
        Command::EvaluateImitation { checkpoint, no_clone } => {
            cmd_evaluate(&cfg, &run_dir, checkpoint.as_deref(), !no_clone)
        }
        Command::CompareLaps { checkpoint } => cmd_compare(&cfg, &run_dir, checkpoint.as_deref()),
        Command::Gradcheck { horizon, instances, step, entries } => {
            cmd_gradcheck(&cfg, &run_dir, horizon, instances, step, entries)
        }
        Command::ExportPlots => {
            let summary = export_plot_data(&run_dir, &cfg)?;
            for s in &summary {
                let r = s.pearson_pd_kappa.map(|r| format!("{r:.3}")).unwrap_or_else(|| "-".into());
                let lap = s.lap_time.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into());
                println!("{:<10} lap {lap:>7}  steps {:>5}  r(p_d, kappa) {r}", s.track, s.steps);
            }
            println!("wrote {}", run_dir.join("plots").display());
            Ok(summary.iter().all(|s| s.lap_time.is_some()))
        }
        Command::Costnet { action: CostnetAction::Info { path } } => {
            write_info(&path, std::io::stdout().lock())?;
            Ok(true)
        }
    }
}

fn track_check(cfg: &Config, names: &[String]) -> Result<bool> {
    let mut tracks = Vec::new();
    if names.is_empty() {
        tracks.push((cfg.track_label(), cfg.load_track()?));
        tracks.extend(cfg.test_tracks()?);
    } else {
        for n in names {
            tracks.push((n.clone(), std::sync::Arc::new(resolve_track(n)?)));
        }
    }
    for (name, t) in tracks {
        println!("[{name}]\n{}\n", t.check());
    }
    Ok(true)
}

fn cmd_train(cfg: &Config, run_dir: &Path) -> Result<bool> {
    let setup = cfg.setup()?;
    let mut tc = cfg.train_config();
    tc.output_dir = Some(run_dir.to_path_buf());
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;
    let out = train(&tc, &setup)?;
    let lap = out.best_lap.map(|t| format!("{t:.3} s")).unwrap_or_else(|| "none".into());
    println!("best validation lap {lap} at iteration {}", out.best_iteration);
    println!("checkpoint {}", checkpoint_path(run_dir).display());
    Ok(true)
}

fn checkpoint_or_default(run_dir: &Path, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(run_dir))
}

fn cmd_evaluate(cfg: &Config, run_dir: &Path, checkpoint: Option<&Path>, with_clone: bool) -> Result<bool> {
    let setup = cfg.setup()?;
    let zip = load_controller(&setup, checkpoint_or_default(run_dir, checkpoint))?;
    let mut tc = cfg.train_config();
    tc.short_horizon = zip.short_horizon;
    tc.long_horizon = zip.long_horizon;
    let e = &cfg.experiment;
    let samples = validation_set(&setup, &tc, e.validation_states, e.seed)?;
    let search_set = validation_set(&setup, &tc, e.search_samples, e.seed ^ 0x5eed)?;
    let search = search_constant_delta(&tc, &setup, &search_set, e.search_budget, 2.0)?;
    let clone = if with_clone { Some(train_empc_baseline(&tc, &setup, e.clone_samples, e.clone_epochs)?) } else { None };
    let constant: ConstantDelta = search.best;
    let mut methods = vec![Method::ShortManual, Method::Constant(&constant)];
    if let Some(c) = &clone {
        methods.push(Method::Clone(&c.policy));
    }
    methods.push(Method::Zip(&zip));
    methods.push(Method::LongManual);
    let table = evaluate_imitation(&setup, &tc, &samples, &methods)?;
    table.save(run_dir.join("imitation.csv"))?;
    print!("{table}");
    Ok(true)
}

fn cmd_compare(cfg: &Config, run_dir: &Path, checkpoint: Option<&Path>) -> Result<bool> {
    let setup = cfg.setup()?;
    let zip = load_controller(&setup, checkpoint_or_default(run_dir, checkpoint))?;
    let e = &cfg.experiment;
    let starts = noisy_starts(cfg.model.kind, &cfg.start_state(), e.noise, e.repetitions, e.seed)?;
    let mut tracks = vec![(cfg.track_label(), setup.track.clone())];
    tracks.extend(cfg.test_tracks()?);
    let laps = compare_laps(&zip, &tracks, &starts, e.lap_steps, Some(&run_dir.join("trajectories")))?;
    laps.save(run_dir.join("laps.csv"))?;
    print!("{laps}");

    let mut tc = cfg.train_config();
    tc.long_horizon = zip.long_horizon;
    let states: Vec<_> =
        validation_set(&setup, &tc, e.validation_states, e.seed)?.into_iter().map(|s| s.state).collect();
    let timing = execution_times(&zip, &states, 1)?;
    timing.save(run_dir.join("timing.csv"))?;
    println!("\n{timing}");
    Ok(!laps.incomplete())
}

fn cmd_gradcheck(
    cfg: &Config,
    run_dir: &Path,
    horizon: usize,
    instances: usize,
    step: f64,
    entries: Option<usize>,
) -> Result<bool> {
    if horizon == 0 {
        return Err(Error::Config("gradcheck horizon must be positive".into()));
    }
    let setup = cfg.setup()?;
    let tc = cfg.train_config();
    let weights: DVector<f64> = tc.weights(&setup)?;
    let prob = setup.problem(horizon)?;
    let reference_prob = setup.problem(2 * horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed);
    let mut worst: f64 = 0.0;
    std::fs::create_dir_all(run_dir)?;
    for k in 0..instances {
        let sample = sample_feasible(&setup, &tc.ranges, &mut rng, &reference_prob, tc.max_retries)?;
        let reference = (0..=horizon).map(|i| sample.long.stage_vector(i)).collect();
        let loss = LossSpec::Tracking { reference, weights: weights.clone() };
        let x0 = prob.system.augment(&sample.state);
        let report = gradcheck(&prob, &x0, &loss, step, cfg.experiment.seed + k as u64, entries)?;
        report.save_csv(run_dir.join(format!("gradcheck_{k}.csv")))?;
        println!(
            "instance {k}: {} entries, max rel err {:.3e}, {} failed, {:?}",
            report.rows.len(),
            report.max_rel_err,
            report.failed_entries(),
            report.curvature
        );
        worst = worst.max(report.max_rel_err);
    }
    println!("worst {worst:.3e}; csv in {} (output root from ${OUTPUT_ROOT_ENV})", run_dir.display());
    Ok(true)
}
