//! Builds a cost network, evaluates it, and round-trips it through a checkpoint.
use std::collections::BTreeMap;

use zipmpc::costnet::{write_info, CostNet, NetInput};
use zipmpc::zipmpc::{state_features, Setup};
use zipmpc::dynamics::VehicleState;

fn main() -> zipmpc::Result<()> {
    let setup = Setup::kinematic("train")?;
    let mut net = CostNet::new(setup.net_config(5, 18), 1)?;
    println!("{} parameters", net.num_params());

    let x = VehicleState::kinematic(1.0, 0.05, 0.0, 1.2);
    let context = setup.context(1.0, 18);
    let cost = net.eval(&NetInput { state: state_features(&x), context: &context })?;
    println!("fresh head, stage-0 q: {:.3}", cost.q[0].transpose());

    // pretend we trained: nudge the weights
    let theta: Vec<f64> = net.params().iter().map(|v| v + 1e-3).collect();
    net.set_params(theta)?;

    let path = std::env::temp_dir().join("costnet_example.bin");
    let meta = BTreeMap::from([("note".to_string(), "example".to_string())]);
    net.save(&path, &meta)?;
    let (back, meta) = CostNet::load(&path)?;
    assert_eq!(back.params(), net.params());
    println!("reloaded, meta {meta:?}");
    write_info(&path, std::io::stdout().lock())?;
    Ok(())
}
