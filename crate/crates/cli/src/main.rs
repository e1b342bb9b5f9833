//! `layergrad`: batch driver for continual-learning experiments.
//!
//! Exit codes: 0 success, 1 a verification suite failed, 2 invalid
//! configuration or arguments, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use layergrad::verify::{self, VerifyOptions};

use crate::config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Runtime(#[from] layergrad::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "layergrad",
    version,
    about = "Continual-learning experiments with decomposed gradient updates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured variant and seed, writing metrics per run.
    Run {
        /// TOML configuration; built-in defaults when omitted.
        #[arg(short, long, conflicts_with = "replay")]
        config: Option<PathBuf>,
        /// Re-run the configuration recorded in a run manifest.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Output root (same as `run.out_dir=...`).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// `key.path=value` overrides applied after the file.
        overrides: Vec<String>,
    },
    /// Sweep the PCA dimension K and write `sweep_k.csv`.
    SweepK {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Run the solver, projection, decomposition and gradient property suites.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Random instances per suite.
        #[arg(long, default_value_t = 500)]
        instances: usize,
        /// Directory for failing instances (JSON).
        #[arg(long)]
        failures: Option<PathBuf>,
        #[arg(long, hide = true)]
        mutant: Option<Mutant>,
    },
    /// Recompute ACC/BWT tables from stored accuracy matrices.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutant {
    SignFlip,
}

fn load(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    mut overrides: Vec<String>,
) -> Result<ExperimentConfig, CliError> {
    if let Some(out) = out {
        overrides.push(format!(
            "run.out_dir={}",
            toml::Value::String(out.display().to_string())
        ));
    }
    match config {
        Some(path) => ExperimentConfig::load(&path, &overrides),
        None => ExperimentConfig::from_toml("", &overrides),
    }
}

fn dispatch(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run {
            config,
            replay,
            out,
            overrides,
        } => {
            let cfg = match replay {
                Some(manifest) => {
                    let text = toml::to_string(&commands::config_from_manifest(&manifest)?)
                        .expect("configuration serializes to TOML");
                    let mut overrides = overrides;
                    if let Some(out) = out {
                        overrides.push(format!(
                            "run.out_dir={}",
                            toml::Value::String(out.display().to_string())
                        ));
                    }
                    ExperimentConfig::from_toml(&text, &overrides)?
                }
                None => load(config, out, overrides)?,
            };
            commands::cmd_run(&cfg)?;
            Ok(0)
        }
        Command::SweepK {
            config,
            k,
            out,
            overrides,
        } => {
            let cfg = load(config, out, overrides)?;
            commands::cmd_sweep_k(&cfg, &k)?;
            Ok(0)
        }
        Command::Verify {
            seed,
            instances,
            failures,
            mutant,
        } => {
            let opts = VerifyOptions {
                seed,
                instances,
                solver: match mutant {
                    Some(Mutant::SignFlip) => verify::sign_flipped_solver,
                    None => layergrad::solve_update,
                },
            };
            let ok = commands::cmd_verify(&opts, failures.as_deref())?;
            Ok(if ok { 0 } else { 1 })
        }
        Command::Report { dir } => {
            commands::cmd_report(&dir)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
