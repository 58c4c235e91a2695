//! Trains briefly and writes the CSV files used for plotting.
use zipmpc::config::Config;
use zipmpc::experiment::export_plot_data;
use zipmpc::zipmpc::train;

fn main() -> zipmpc::Result<()> {
    let cfg = Config::from_toml("[training]\niterations = 20\nvalidation_every = 10\n")?;
    let run_dir = std::env::temp_dir().join("zipmpc_plot_example");
    let mut tc = cfg.train_config();
    tc.output_dir = Some(run_dir.clone());
    train(&tc, &cfg.setup()?)?;
    for s in export_plot_data(&run_dir, &cfg)? {
        println!("{}: lap {:?}, {} steps, r(p_d, kappa) {:?}", s.track, s.lap_time, s.steps, s.pearson_pd_kappa);
    }
    println!("files in {}", run_dir.join("plots").display());
    Ok(())
}
