//! Lap times on seen and unseen tracks plus per-step solve times.
//! Pass a checkpoint path to use a trained network; otherwise a fresh one
//! (which behaves exactly like the short-horizon controller) is used.
use std::sync::Arc;

use zipmpc::costnet::CostNet;
use zipmpc::dynamics::{ModelKind, VehicleState};
use zipmpc::experiment::{compare_laps, execution_times, noisy_starts, validation_set};
use zipmpc::track::TrackModel;
use zipmpc::zipmpc::{load_controller, Setup, TrainConfig, ZipMpc};

fn main() -> zipmpc::Result<()> {
    let setup = Setup::kinematic("train")?;
    let zip = match std::env::args().nth(1) {
        Some(path) => load_controller(&setup, path)?,
        None => ZipMpc::new(setup.clone(), 10, 25, CostNet::new(setup.net_config(10, 25), 0)?)?,
    };
    let tracks: Vec<_> = ["train", "test1", "test2"]
        .iter()
        .map(|n| Ok((n.to_string(), Arc::new(TrackModel::bundled(n)?))))
        .collect::<zipmpc::Result<_>>()?;
    let starts = noisy_starts(ModelKind::Kinematic, &VehicleState::kinematic(0.0, 0.0, 0.0, 1.0), 0.01, 2, 5)?;
    print!("{}", compare_laps(&zip, &tracks, &starts, 2000, None)?);

    let cfg = TrainConfig { short_horizon: zip.short_horizon, long_horizon: zip.long_horizon, ..Default::default() };
    let states: Vec<_> = validation_set(&setup, &cfg, 50, 3)?.into_iter().map(|s| s.state).collect();
    println!("\n{}", execution_times(&zip, &states, 1)?);
    Ok(())
}
