//! How closely each short-horizon method reproduces the long-horizon plan.
use zipmpc::experiment::{evaluate_imitation, validation_set, Method};
use zipmpc::zipmpc::{search_constant_delta, train, train_empc_baseline, Setup, TrainConfig, ZipMpc};

fn main() -> zipmpc::Result<()> {
    let setup = Setup::kinematic("train")?;
    let cfg = TrainConfig { iterations: 300, validation_every: 0, ..Default::default() };
    let out = train(&cfg, &setup)?;
    let zip = ZipMpc::new(setup.clone(), cfg.short_horizon, cfg.long_horizon, out.last)?;

    let val = validation_set(&setup, &cfg, 50, 11)?;
    let search = search_constant_delta(&cfg, &setup, &val[..20], 10, 2.0)?;
    let clone = train_empc_baseline(&cfg, &setup, 200, 10)?;
    let methods = [
        Method::ShortManual,
        Method::Constant(&search.best),
        Method::Clone(&clone.policy),
        Method::Zip(&zip),
        Method::LongManual,
    ];
    print!("{}", evaluate_imitation(&setup, &cfg, &val, &methods)?);
    Ok(())
}
