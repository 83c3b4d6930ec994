//! `ccorbit`: plan chance-constrained output-feedback policies and certify
//! them by Monte Carlo.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use ccorbit::scenarios::McMode;
use clap::{Parser, Subcommand, ValueEnum};

mod artifacts;
mod commands;
mod report;

use artifacts::Exit;
use commands::SimulateOptions;

#[derive(Debug, Parser)]
#[command(name = "ccorbit", version, about = "Chance-constrained spacecraft control planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Linear,
    Nonlinear,
}

impl From<Mode> for McMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Linear => McMode::Linear,
            Mode::Nonlinear => McMode::Nonlinear,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the policy and write plan.json plus per-node series.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override a scenario value, e.g. `risk.eps_x=0.01`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Monte Carlo of a plan; writes mc_report.json and histogram.csv.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Plan to simulate; defaults to `<out>/plan.json`.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Also write every sampled trajectory to trajectories.csv.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Summarize a run directory against the acceptance checks.
    Report {
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Plan { scenario, out, set } => commands::cmd_plan(&scenario, &out, &set).map(|()| ExitCode::SUCCESS),
        Command::Simulate { scenario, out, plan, seed, samples, mode, set, dump_trajectories } => {
            let opts = SimulateOptions { plan, samples, seed, mode: mode.map(Into::into), dump_trajectories };
            commands::cmd_simulate(&scenario, &out, &set, &opts)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out } => {
            print!("{}", report::render(&out)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Exit>().map_or(1, |x| x.code))
        }
    }
}
