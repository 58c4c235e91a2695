use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zipmpc::costnet::CostNet;
use zipmpc::dynamics::{VehicleModel, VehicleState};
use zipmpc::experiment::{evaluate_imitation, trace_lap, validation_set, Method};
use zipmpc::solver::{run_lap, LapFailure, Policy};
use zipmpc::track::{TrackModel, TrackSegment, DEFAULT_SPACING};
use zipmpc::zipmpc::{
    pearson, sample_feasible, search_constant_delta, train, train_empc_baseline, EmpcClone, NetOverrides,
    SampleRanges, Setup, TrainConfig, ZipMpc,
};
use zipmpc::Error;

fn small_config() -> TrainConfig {
    TrainConfig {
        short_horizon: 4,
        long_horizon: 10,
        loss_horizon: 3,
        batch_size: 2,
        iterations: 4,
        validation_every: 0,
        net: NetOverrides { fc_widths: Some(vec![16]), ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn untrained_controller_retraces_manual_mpc_bitwise() {
    let setup = Setup::kinematic("test1").unwrap();
    let net = CostNet::new(setup.net_config(5, 18), 123).unwrap();
    let mut zip = ZipMpc::new(setup.clone(), 5, 18, net).unwrap();
    let mut mpc = setup.mpc(5).unwrap();
    let x0 = VehicleState::kinematic(0.0, 0.0, 0.0, 1.0);
    let a = run_lap(&setup.model, &setup.track, &mut zip, x0, 2000);
    let b = run_lap(&setup.model, &setup.track, &mut mpc, x0, 2000);
    assert!(a.completed());
    assert_eq!(a.steps.len(), b.steps.len());
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        assert_eq!(sa.state, sb.state);
        assert_eq!(sa.input, sb.input);
    }
    assert_eq!(a.lap_time.unwrap().to_bits(), b.lap_time.unwrap().to_bits());
}

#[test]
fn zero_iterations_keeps_the_initial_network() {
    let setup = Setup::kinematic("train").unwrap();
    let cfg = TrainConfig { iterations: 0, ..small_config() };
    let out = train(&cfg, &setup).unwrap();
    let fresh = CostNet::new(cfg.net_config(&setup), cfg.seed).unwrap();
    assert_eq!(out.best.params(), fresh.params());
    assert_eq!(out.log.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let setup = Setup::kinematic("train").unwrap();
    let cfg = small_config();
    let a = train(&cfg, &setup).unwrap();
    let b = train(&cfg, &setup).unwrap();
    assert_eq!(a.last.params(), b.last.params());
    let strip = |o: &zipmpc::zipmpc::TrainOutcome| {
        o.log.iter().map(|e| (e.iteration, e.loss.map(f64::to_bits), e.used, e.skipped, e.rejected)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert!(a.log[1..].iter().all(|e| e.loss.is_some()));
    assert_ne!(a.last.params(), CostNet::new(cfg.net_config(&setup), cfg.seed).unwrap().params());
}

#[test]
fn training_writes_log_and_checkpoints() {
    let setup = Setup::kinematic("train").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { validation_every: 2, output_dir: Some(dir.path().to_path_buf()), ..small_config() };
    let out = train(&cfg, &setup).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.iterations + 1);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first.get("validation_lap").is_some());
    let zip = zipmpc::zipmpc::load_controller(&setup, dir.path().join("best.bin")).unwrap();
    assert_eq!(zip.net.params(), out.best.params());
    assert!(dir.path().join("last.bin").is_file());
}

#[test]
fn feasibility_filter_rejects_states_aimed_at_the_wall() {
    let setup = Setup::kinematic("train").unwrap();
    let long = setup.problem(18).unwrap();
    // first arc turns left (kappa = 2); start at the left limit heading further left
    let ranges = SampleRanges { s: Some([1.05, 1.3]), d: [0.99, 1.0], phi: [0.35, 0.4], v: [1.6, 1.8] };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rejected = 0;
    for _ in 0..20 {
        match sample_feasible(&setup, &ranges, &mut rng, &long, 100) {
            Ok(s) => rejected += s.rejected,
            Err(Error::SamplingRegion(_)) => rejected += 100,
            Err(e) => panic!("{e}"),
        }
    }
    assert!(rejected > 0);
}

#[test]
fn hopeless_region_is_reported() {
    let setup = Setup::kinematic("train").unwrap();
    let long = setup.problem(18).unwrap();
    let ranges = SampleRanges::point(1.22, 1.0, 0.4, 1.8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_feasible(&setup, &ranges, &mut rng, &long, 3).unwrap_err();
    assert!(matches!(err, Error::SamplingRegion(3)));
}

#[test]
fn trace_has_one_row_per_step_on_a_straight() {
    let track = Arc::new(TrackModel::build_unchecked(vec![TrackSegment::straight(3.0)], 0.2, DEFAULT_SPACING).unwrap());
    let setup = Setup::new(VehicleModel::kinematic(), track);
    let net = CostNet::new(setup.net_config(5, 10), 0).unwrap();
    let mut zip = ZipMpc::new(setup, 5, 10, net).unwrap();
    let (lap, trace) = trace_lap(&mut zip, VehicleState::kinematic(0.0, 0.0, 0.0, 1.0), 1000);
    assert!(lap.completed());
    assert_eq!(trace.len(), lap.steps.len());
    assert!(trace.p_d.iter().all(|v| v.is_finite()));
    assert_eq!(trace.to_csv().lines().count(), lap.steps.len() + 1);
}

#[test]
fn pearson_agrees_with_one_pass_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    use rand::Rng;
    for _ in 0..20 {
        let n = rng.gen_range(3..200);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.gen_range(-1.0..1.0)).collect();
        let nf = n as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let r = (nf * sxy - sx * sy) / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
        assert!((pearson(&x, &y).unwrap() - r).abs() < 1e-10);
    }
}

#[test]
fn clone_leaving_the_track_is_detected() {
    let setup = Setup::kinematic("train").unwrap();
    // a fresh clone outputs zero inputs and drives straight into the first bend
    let net = CostNet::new(EmpcClone::config(&setup, 18, &NetOverrides::default()), 0).unwrap();
    let mut clone = EmpcClone { setup: setup.clone(), long_horizon: 18, net };
    clone.reset();
    let lap = run_lap(&setup.model, &setup.track, &mut clone, VehicleState::kinematic(0.0, 0.0, 0.0, 1.0), 2000);
    match lap.failure {
        Some(LapFailure::OffTrack { d, .. }) => assert!(d.abs() > setup.track.half_width()),
        other => panic!("expected off-track, got {other:?}"),
    }
}

#[test]
fn clone_fit_reduces_training_error() {
    let setup = Setup::kinematic("train").unwrap();
    let cfg = TrainConfig { long_horizon: 10, ..small_config() };
    let out = train_empc_baseline(&cfg, &setup, 24, 30).unwrap();
    assert!(out.train_mse.last().unwrap() < &(0.5 * out.train_mse[0]));
}

#[test]
fn constant_search_never_worse_than_manual() {
    let setup = Setup::kinematic("train").unwrap();
    let cfg = small_config();
    let samples = validation_set(&setup, &cfg, 6, 2).unwrap();
    let one = search_constant_delta(&cfg, &setup, &samples, 1, 2.0).unwrap();
    assert_eq!(one.best_loss, one.manual_loss);
    assert!(one.best.dq.iter().chain(one.best.dp.iter()).all(|v| *v == 0.0));
    let more = search_constant_delta(&cfg, &setup, &samples, 8, 2.0).unwrap();
    assert!(more.best_loss <= more.manual_loss);
}

#[test]
fn imitation_table_is_reproducible() {
    let setup = Setup::kinematic("train").unwrap();
    let cfg = small_config();
    let run = || {
        let samples = validation_set(&setup, &cfg, 8, 4).unwrap();
        evaluate_imitation(&setup, &cfg, &samples, &[Method::ShortManual, Method::LongManual]).unwrap()
    };
    assert_eq!(run(), run());
}
