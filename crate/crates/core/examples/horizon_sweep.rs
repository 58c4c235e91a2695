//! Lap time of the manual controller for a few horizons and noisy starts.
use zipmpc::dynamics::{ModelKind, VehicleState};
use zipmpc::experiment::{horizon_study, noisy_starts};
use zipmpc::zipmpc::Setup;

fn main() -> zipmpc::Result<()> {
    let setup = Setup::kinematic("train")?;
    let starts = noisy_starts(ModelKind::Kinematic, &VehicleState::kinematic(0.0, 0.0, 0.0, 1.0), 0.01, 3, 7)?;
    let table = horizon_study(&setup, &[5, 10, 20], &starts, 2000)?;
    print!("{table}");
    Ok(())
}
