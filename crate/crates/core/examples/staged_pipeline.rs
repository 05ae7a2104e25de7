//! Run every stage against a run directory, as the CLI does, and list the
//! artifacts produced.
//!
//! `cargo run --release --example staged_pipeline -- [run_dir]`

use interv_forecast::pipeline::{PipelineConfig, RunContext};

fn main() -> interv_forecast::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "run_demo".into());
    let cfg = PipelineConfig::from_toml(
        "[synth]\nusers = 3\ndays = 5\n[model]\nwidth = 16\nheads = 2\nffn_hidden = 32\ndepth = 1\n[model.optimizer]\nmax_epochs = 3\n",
    )?;
    let ctx = RunContext::new(cfg, out.clone().into(), false)?;
    println!("config hash {}", ctx.config_hash);
    ctx.run_all()?;
    let bars = std::fs::read_to_string(ctx.out.join("evaluation/bars.csv"))?;
    println!("{}", bars.lines().take(7).collect::<Vec<_>>().join("\n"));
    println!("artifacts under {out}");
    Ok(())
}
