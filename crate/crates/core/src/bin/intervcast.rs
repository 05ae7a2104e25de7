//! `intervcast`: run the forecasting pipeline stage by stage.
//!
//! Configuration comes from `--config` (TOML) with `INTERVCAST__section__key`
//! environment overrides. Exit codes: 0 success, 2 missing input, 3 invalid
//! configuration, 4 config hash mismatch, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use interv_forecast::pipeline::{exit_code, PipelineConfig, RunContext, Stage};

#[derive(Parser)]
#[command(name = "intervcast", version, about = "Intervention-anchored wearable physiology forecasting")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue when upstream artifacts were produced under another config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic cohort with ground truth under the data root.
    Simulate,
    /// Parse raw streams and align them to the minute grid.
    Ingest,
    /// Compute RMSSD and the feature frame.
    Featurize,
    /// Build intervention-anchored examples and labels.
    Label,
    /// Assign leak-safe train/validation/test splits.
    Split,
    /// Fit the forecaster.
    Train,
    /// Fit onset shift, isotonic maps and sign thresholds.
    Calibrate,
    /// Score test interventions and write reports.
    Evaluate,
    /// Write sign-pattern heatmaps.
    Heatmap,
    /// Run every stage, simulating first when no data root is set.
    All,
    /// Print the resolved configuration and its hash.
    Config,
}

fn run(cli: &Cli) -> interv_forecast::Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    let out = config.output.dir.clone();
    let ctx = RunContext::new(config, out, cli.force)?;
    let stage = match cli.command {
        Command::All => return ctx.run_all(),
        Command::Config => {
            println!("# config_hash = {}\n{}", ctx.config_hash, ctx.config.to_toml());
            return Ok(());
        }
        Command::Simulate => Stage::Simulate,
        Command::Ingest => Stage::Ingest,
        Command::Featurize => Stage::Featurize,
        Command::Label => Stage::Label,
        Command::Split => Stage::Split,
        Command::Train => Stage::Train,
        Command::Calibrate => Stage::Calibrate,
        Command::Evaluate => Stage::Evaluate,
        Command::Heatmap => Stage::Heatmap,
    };
    ctx.run(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
