//! `volformer`: synthetic data, matching, fold assignment, weight import,
//! cross-validated training, evaluation and rollout heatmaps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "volformer", version, about = "Volume transformer runs from a JSON config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate config and inputs, then exit without writing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic matched cohort.
    Synth,
    /// Match cases to controls.
    Match,
    /// Assign matched pairs to six folds.
    Split,
    /// Adapt a 2D checkpoint to the volume geometry.
    Import,
    /// Six-fold cross-validated training.
    Train,
    /// Summarize held-out predictions.
    Eval,
    /// Export attention-rollout heatmaps for held-out cases.
    Rollout,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <file> is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(CliError::Usage)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let dry = cli.dry_run;
    match cli.command {
        Command::Synth => commands::synth(&cfg, dry),
        Command::Match => commands::match_cmd(&cfg, dry),
        Command::Split => commands::split(&cfg, dry),
        Command::Import => commands::import(&cfg, dry),
        Command::Train => commands::train(&cfg, dry),
        Command::Eval => commands::eval(&cfg, dry),
        Command::Rollout => commands::rollout(&cfg, dry),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("volformer: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
