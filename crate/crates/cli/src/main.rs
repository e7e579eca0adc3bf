use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use polychaos_cli::{run_file, CliError, Mode, RunOptions, THREADS_ENV};

#[derive(Parser)]
#[command(
    name = "polychaos",
    version,
    about = "Polynomial chaos propagation, stochastic MPC and PCE filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Galerkin propagation with a Monte Carlo reference.
    Propagate(Common),
    /// Receding-horizon stochastic MPC on sampled plants.
    Smpc(Common),
    /// Sequential Bayesian update of a scalar parameter expansion.
    Estimate(Common),
    /// Propagation plus a Galerkin vs Monte Carlo moment report.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common) = match cli.command {
        Command::Propagate(c) => (Mode::Propagate, c),
        Command::Smpc(c) => (Mode::Smpc, c),
        Command::Estimate(c) => (Mode::Estimate, c),
        Command::Compare(c) => (Mode::Compare, c),
    };
    let opts = RunOptions {
        mode: Some(mode),
        out: common.out,
        seed: common.seed,
        mc_samples: common.mc_samples,
    };
    let result = init_threads().and_then(|_| run_file(&common.config, &opts));
    match result {
        Ok(outcome) => {
            if !common.quiet {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&outcome.summary["results"]).expect("summary serializes")
                );
            }
            ExitCode::from(outcome.exit.code() as u8)
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit().code() as u8)
        }
    }
}
