use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robust_sur::Method;
use robust_sur_cli::{self as cli, BenchArgs, CliError, FitArgs, SimulateArgs};

#[derive(Parser)]
#[command(name = "robust-sur", version, about = "Robust estimation of seemingly unrelated regressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a SUR system to a CSV file.
    Fit {
        /// CSV file with a header row.
        #[arg(long)]
        data: PathBuf,
        /// Model specification (JSON, or TOML by extension).
        #[arg(long, visible_alias = "config")]
        model: PathBuf,
        /// sure, surerob or fastsur.
        #[arg(long, default_value = "surerob")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Require coefficient inference (not available for fastsur).
        #[arg(long)]
        inference: bool,
    },
    /// Run a Monte Carlo scenario and write long-format tables.
    Simulate {
        /// Scenario file (TOML, or JSON by extension).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "RSUR_THREADS")]
        threads: Option<usize>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Time each method on a scenario, one fit at a time.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Also write bench.csv and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        quiet: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { data, model, method, out, seed, inference } => {
            let manifest = cli::cmd_fit(&FitArgs { data, model, method, out, seed, inference })?;
            println!("{}", manifest.display());
        }
        Command::Simulate { config, out, threads, seed, quiet } => {
            let manifest = cli::cmd_simulate(&SimulateArgs { config, out, threads, seed, quiet })?;
            println!("{}", manifest.display());
        }
        Command::Bench { config, out, seed, quiet } => {
            let (rows, _) = cli::cmd_bench(&BenchArgs { config, out, seed, quiet })?;
            print!("{}", cli::bench_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
