use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualbounds_cli::run::{run_estimate, run_simulate, RunOptions};
use dualbounds_cli::CliError;

/// Dual bounds on partially identified causal estimands.
///
/// Exit codes: 0 ok, 1 output i/o error, 2 config error, 3 data error,
/// 4 numerical failure.
#[derive(Parser)]
#[command(name = "dualbounds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate bounds from a CSV described by a TOML config.
    Estimate(RunArgs),
    /// Run simulation scenarios and tabulate coverage.
    Simulate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (args, simulate) = match cli.command {
        Command::Estimate(a) => (a, false),
        Command::Simulate(a) => (a, true),
    };
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let opts = RunOptions { config: args.config, seed: args.seed, output: args.output };
    if simulate {
        run_simulate(&opts)
    } else {
        run_estimate(&opts)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
