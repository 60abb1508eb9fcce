use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psmpc::cli::{cmd_certify, cmd_compare, cmd_run, configure_threads, RunOverrides};
use psmpc::supervisor::Mode;

#[derive(Parser)]
#[command(name = "psmpc", version, about = "Switched parallel MPC: synthesis, simulation and comparison")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario and write log, plot data and manifest.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// pSMPC, single:<id> or random:<seed>
        #[arg(long)]
        controller: Option<String>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run every single controller and pSMPC in both modes and tabulate.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize terminal ingredients and print the certificates.
    Certify {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match args.cmd {
        Cmd::Run { scenario, out, seed, controller, mode } => {
            cmd_run(&scenario, &out, &RunOverrides { seed, controller, mode })
        }
        Cmd::Compare { scenario, out } => cmd_compare(&scenario, &out),
        Cmd::Certify { scenario, out } => cmd_certify(&scenario, out.as_deref()),
    };
    ExitCode::from(code as u8)
}
