//! `cldistill` — run, sweep, compress, and validate continual-distillation
//! experiments. Exit codes: 0 success, 1 runtime failure, 2 config/usage
//! error. Set `CLDISTILL_LOG={error|info|debug}` for progress logging.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cldistill::commands;

#[derive(Parser)]
#[command(name = "cldistill", version, about = "Continual-learning distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `distill.variant=gkd` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment and write its artifact directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for run artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a variants x seeds x orders cross-product of experiments.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Distillation variants to sweep (comma-separated; default: the
        /// config's variant).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Training seeds to sweep (comma-separated; default: the config's
        /// seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Sweep task orders 0..N (default: the config's order-seed only).
        #[arg(long)]
        orders: Option<usize>,
        /// Skip cells that already have a metrics.json.
        #[arg(long)]
        resume: bool,
        /// Worker threads (default: available cores minus one).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Distill a teacher checkpoint into a smaller student.
    Compress {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint produced by `run`.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config file and print the resolved settings.
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write example datasets and configs to try the other commands on.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> cldistill::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            commands::cmd_run(&config.config, &out, &config.overrides)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, out, variants, seeds, orders, resume, parallel } => {
            let base = cldistill::config::load_config(&config.config, &config.overrides)?;
            let axes = commands::SweepAxes::resolve(&base, &variants, &seeds, orders)?;
            let outcome =
                commands::cmd_sweep(&config.config, &out, &config.overrides, &axes, parallel, resume)?;
            if outcome.failed > 0 {
                eprintln!("error: {} sweep cell(s) failed", outcome.failed);
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Compress { config, teacher, out } => {
            commands::cmd_compress(&config.config, &teacher, &out, &config.overrides)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateConfig { config } => {
            commands::cmd_validate_config(&config.config, &config.overrides)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeFixtures { out } => {
            commands::cmd_make_fixtures(&out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLDISTILL_LOG", "error"))
        .init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
