//! Command-line harness for the Wasserstein tube MPC studies.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure,
//! 4 problem infeasible at the initial state.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wtmpc::harness::{
    dump_gamma, emit_outputs, run_closed_loop, run_open_loop, run_tube_sections, ExperimentConfig,
    HarnessError,
};

#[derive(Parser)]
#[command(
    name = "wtmpc",
    about = "Wasserstein tube MPC: open-/closed-loop Monte Carlo studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Open-loop violation study over the (epsilon, n) sweep
    RunOpenLoop {
        /// TOML config; benchmark defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// output directory override
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop cost/violation study over the sweep
    RunClosedLoop {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export tube cross sections, center atoms and nominal plans
    Tube {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the dimensions and offsets of the constraint blocks at a step
    DumpGamma {
        #[arg(long)]
        config: Option<PathBuf>,
        /// prediction step k in [1, N-1]
        #[arg(long)]
        step: usize,
    },
}

fn load(config: &Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::benchmark_default()),
    }
}

fn run() -> Result<(), HarnessError> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::RunOpenLoop { config, out } => {
            let mut cfg = load(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let table = run_open_loop(&cfg)?;
            let files = emit_outputs(&table, &cfg, &cfg.output_dir.clone())?;
            eprintln!("open-loop study: {} rows", table.rows.len());
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::RunClosedLoop { config, out } => {
            let mut cfg = load(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let table = run_closed_loop(&cfg)?;
            let files = emit_outputs(&table, &cfg, &cfg.output_dir.clone())?;
            eprintln!("closed-loop study: {} rows", table.rows.len());
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::Tube { config, out } => {
            let mut cfg = load(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let files = run_tube_sections(&cfg, &cfg.output_dir.clone())?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::DumpGamma { config, step } => {
            let cfg = load(&config)?;
            print!("{}", dump_gamma(&cfg, step)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
