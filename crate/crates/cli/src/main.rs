use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use dpfw_cli::commands::{self, EvaluateArgs, OracleBenchArgs, PhantomArgs, ReconstructArgs};

#[derive(Parser)]
#[command(
    name = "dpfw",
    version,
    about = "Dynamic sparse reconstruction with a shortest-path oracle"
)]
struct Cli {
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic data and its ground truth.
    Phantom(PhantomArgs),
    /// Run the solver on a data set.
    Reconstruct(ReconstructArgs),
    /// Compare a solution with a ground truth; prints JSON.
    Evaluate(EvaluateArgs),
    /// Time the oracle sweep across mesh sizes; prints CSV.
    OracleBench(OracleBenchArgs),
}

fn run(cli: Cli) -> Result<i32> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    match cli.command {
        Command::Phantom(args) => commands::phantom(&args).map(|_| 0),
        Command::Reconstruct(args) => commands::reconstruct(&args),
        Command::Evaluate(args) => {
            println!("{}", commands::evaluate(&args)?);
            Ok(0)
        }
        Command::OracleBench(args) => {
            print!("{}", commands::oracle_bench(&args)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
