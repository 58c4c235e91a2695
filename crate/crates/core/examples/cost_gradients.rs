//! Gradient of a trajectory loss with respect to every cost weight, checked
//! against re-solving with perturbed weights.
use nalgebra::DVector;
use zipmpc::diffmpc::{backward, gradcheck, LossSpec};
use zipmpc::dynamics::VehicleState;
use zipmpc::solver::SolverOptions;
use zipmpc::zipmpc::Setup;

fn main() -> zipmpc::Result<()> {
    let setup = Setup::kinematic("train")?;
    let prob = setup.problem(5)?.with_options(SolverOptions::tight());
    let x = VehicleState::kinematic(1.2, 0.12, 0.1, 1.4);
    let x0 = prob.system.augment(&x);

    let record = zipmpc::solver::solve(&prob, &x0, None)?;
    let reference: Vec<_> = (0..=5).map(|i| record.stage_vector(i) * 0.9).collect();
    let loss = LossSpec::Tracking { reference, weights: DVector::from_element(8, 1.0) };
    let (value, upstream) = loss.evaluate(&record)?;
    let grad = backward(&prob, &record, &upstream)?;
    println!("loss {value:.4e}, largest |dL/dq| {:.3e}", grad.dq.iter().map(|v| v.amax()).fold(0.0, f64::max));
    println!("dL/dp at stage 0: {:?}", grad.dp[0].iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>());

    let report = gradcheck(&prob, &x0, &loss, 1e-2, 0, Some(20))?;
    println!(
        "{} entries checked, max rel err {:.2e}, {} at active-set changes",
        report.rows.len(),
        report.max_rel_err,
        report.switched_entries()
    );
    Ok(())
}
