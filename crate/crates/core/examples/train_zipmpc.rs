//! Short training run; writes the log and checkpoints to a temp directory.
use zipmpc::zipmpc::{train, Setup, TrainConfig};

fn main() -> zipmpc::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let dir = std::env::temp_dir().join("zipmpc_train_example");
    let setup = Setup::kinematic("train")?;
    let cfg = TrainConfig { iterations, validation_every: 25, output_dir: Some(dir.clone()), ..Default::default() };
    let out = train(&cfg, &setup)?;
    for e in &out.log {
        if let Some(lap) = e.validation_lap {
            println!("iter {:>5}  loss {:>10}  lap {lap:.3}", e.iteration, e.loss.map_or("-".into(), |l| format!("{l:.4e}")));
        }
    }
    println!("best iteration {} -> {}", out.best_iteration, dir.join("best.bin").display());
    Ok(())
}
