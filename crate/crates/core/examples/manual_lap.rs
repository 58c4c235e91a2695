//! One closed-loop lap of the hand-tuned contouring controller.
use zipmpc::dynamics::VehicleState;
use zipmpc::zipmpc::Setup;

fn main() -> zipmpc::Result<()> {
    let setup = Setup::kinematic("train")?;
    let mut policy = setup.mpc(15)?;
    let lap = zipmpc::solver::run_lap(&setup.model, &setup.track, &mut policy, VehicleState::kinematic(0.0, 0.0, 0.0, 1.0), 2000);
    match lap.lap_time {
        Some(t) => println!("lap {t:.3} s in {} steps", lap.steps.len()),
        None => println!("no lap: {:?}", lap.failure),
    }
    println!("max |d| {:.4}, mean solve {:.2} ms", lap.max_abs_d(), lap.mean_solve_seconds() * 1e3);
    lap.write_csv(&setup.track, std::env::temp_dir().join("manual_lap.csv"))?;
    Ok(())
}
