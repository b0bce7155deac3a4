//! Command-line runner: `fedamd run | compare | sweep`.
//!
//! Exit codes: 0 on success, 2 on configuration errors (bad config file,
//! bad flags, constraint violations), 1 on runtime errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use fedamd::harness::{
    self, compare_to_csv, compare_to_json, parse_config, sweep_to_csv, sweep_to_json, to_csv,
    to_json, ExperimentConfig,
};
use fedamd::Error;

#[derive(Parser)]
#[command(
    name = "fedamd",
    about = "Simulate anchor-sampling federated learning and its baselines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Override the config's run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Suppress progress logging.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and emit per-round metrics.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run several configs on a shared dataset and emit one summary row each.
    Compare {
        /// Experiment configs (TOML); repeat the flag, at least twice.
        #[arg(long, required = true, num_args = 1)]
        config: Vec<PathBuf>,
        /// Number of consecutive seeds to average per config.
        #[arg(long, default_value_t = 1)]
        seeds: u32,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Grid-search the [sweep] learning-rate lists of a config.
    Sweep {
        /// Experiment config (TOML) with a [sweep] section.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn emit(common: &CommonArgs, text: &str) -> Result<(), Error> {
    match &common.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, common } => {
            let cfg = load_config(&config, common.seed)?;
            info!(
                "running {} for {} rounds (seed {})",
                cfg.algorithm.name(),
                cfg.run.rounds,
                cfg.run.seed
            );
            let artifact = harness::run_experiment(&cfg)?;
            let text = match common.format.as_str() {
                "json" => to_json(&artifact)?,
                _ => to_csv(&artifact),
            };
            emit(&common, &text)
        }
        Command::Compare {
            config,
            seeds,
            common,
        } => {
            if config.len() < 2 {
                return Err(Error::Config(
                    "compare needs at least two --config paths".into(),
                ));
            }
            let mut cfgs = Vec::with_capacity(config.len());
            for path in &config {
                cfgs.push(load_config(path, common.seed)?);
            }
            info!("comparing {} configs over {seeds} seed(s)", cfgs.len());
            let table = harness::compare(&cfgs, seeds)?;
            let text = match common.format.as_str() {
                "json" => compare_to_json(&table)?,
                _ => compare_to_csv(&table),
            };
            emit(&common, &text)
        }
        Command::Sweep { config, common } => {
            let cfg = load_config(&config, common.seed)?;
            let table = harness::sweep(&cfg)?;
            let text = match common.format.as_str() {
                "json" => sweep_to_json(&table)?,
                _ => sweep_to_csv(&table),
            };
            emit(&common, &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Run { common, .. }
        | Command::Compare { common, .. }
        | Command::Sweep { common, .. } => common.quiet,
    };
    let mut builder = env_logger::Builder::from_default_env();
    if quiet {
        builder.filter_level(log::LevelFilter::Off);
    } else if std::env::var_os("RUST_LOG").is_none() {
        builder.filter_level(log::LevelFilter::Info);
    }
    let _ = builder.try_init();

    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
