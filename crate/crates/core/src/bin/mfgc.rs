use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfgc::cli::{run_audits, run_scenario, RunOptions};

#[derive(Parser)]
#[command(name = "mfgc", version, about = "Run and audit mean field game scenarios")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit 0 and keep the outputs when the solve stops short of the tolerance.
    #[arg(long, global = true)]
    allow_nonconverged: bool,
    /// Skip the work when the output directory already holds this run.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve, certify and write report.json, measures.json, value.csv, sigma.csv.
    Run { config: PathBuf },
    /// Run the invariant suites and write one CSV per suite.
    Audit { config: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions {
        seed: args.seed,
        threads: args.threads,
        allow_nonconverged: args.allow_nonconverged,
        resume: args.resume,
    };
    let result = match &args.command {
        Command::Run { config } => run_scenario(config, &opts).map(|s| {
            let state = if s.resumed { "up to date" } else { "done" };
            println!(
                "{state}: converged {}, exploitability {:.3e}, certified {} -> {}",
                s.converged,
                s.exploitability,
                s.certified,
                s.output_dir.display()
            );
        }),
        Command::Audit { config } => run_audits(config, &opts).map(|s| {
            for (suite, rows) in &s.suites {
                println!("{suite}: {} checks pass", rows.len());
            }
            println!("{} -> {}", if s.resumed { "up to date" } else { "all pass" }, s.output_dir.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mfgc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
