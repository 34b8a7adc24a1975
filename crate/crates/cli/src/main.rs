//! `zsim`: run experiments, probe sweeps and oracle suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zsim_core::experiment::{run_experiment, run_sweep, ExperimentConfig};
use zsim_core::{verify, SimError};

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "SIMZ_THREADS";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "zsim", version, about = "Stacked intelligent metasurface simulator and optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize every configured variant and write run, summary, sweep and metrics files.
    Run {
        /// TOML config, or a `manifest.json` from an earlier run.
        config: PathBuf,
        /// Overrides `output.directory`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle suites: all, transfer, unilateral, ideal, gradients, scaling.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Recompute probe sweeps from the best phases of a finished run.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &SimError) -> u8 {
    match e {
        SimError::Config { .. } | SimError::Parse { .. } => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> Result<ExperimentConfig, SimError> {
    // An unreadable config file is a usage error, not a run failure.
    let mut config = ExperimentConfig::load(path).map_err(|e| match e {
        SimError::Io { .. } => SimError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        },
        e => e,
    })?;
    if let Some(dir) = out {
        config.output.directory = dir;
    }
    Ok(config)
}

fn configure_threads() -> Result<(), SimError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| SimError::Config {
            path: THREADS_ENV.into(),
            message: format!("expected a positive integer, got `{value}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| SimError::InvalidValue(format!("thread pool: {e}")))
}

fn execute(cli: Cli) -> Result<u8, SimError> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, out } => {
            let config = load_config(&config, out)?;
            let result = run_experiment(&config)?;
            for v in &result.metrics.variants {
                println!(
                    "{:<11} median eps {:.4e}  p10 {:.4e}  p90 {:.4e}  best {:.4e} (start {}, evaluated on {})",
                    v.variant, v.median, v.p10, v.p90, v.best_epsilon, v.best_start, v.evaluate_model
                );
            }
            println!("artifacts written to {}", config.output.directory.display());
            Ok(0)
        }
        Command::Sweep { config, out } => {
            let config = load_config(&config, out)?;
            run_sweep(&config)?;
            println!("sweeps written to {}", config.output.directory.display());
            Ok(0)
        }
        Command::Verify { suite } => {
            let reports = verify::run(&suite).map_err(|e| SimError::Config {
                path: "suite".into(),
                message: e.to_string(),
            })?;
            for r in &reports {
                println!("{}", r.line());
            }
            Ok(if reports.iter().all(|r| r.passed) { 0 } else { EXIT_FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
