//! Command-line front end for the weighted-residual flow simulator.
//!
//! Every subcommand loads a JSON scenario config, applies flag overrides,
//! runs, and writes a report directory named by the config hash. The exit
//! code is 0 when every check passed, 1 when a check failed, and 2 on errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wrflow::scenario::{self, RunOptions, ScenarioConfig};

#[derive(Parser)]
#[command(name = "wrflow", version, about = "Weighted-residual operator flow simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Parent directory for run outputs [default: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count [default: all cores].
    #[arg(long)]
    threads: Option<usize>,
    /// Override the mode: exhaustive or monte-carlo.
    #[arg(long)]
    mode: Option<String>,
    /// Override the tree depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Override the Monte Carlo sample count.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample branches; writes samples.csv and levels.csv.
    Simulate(CommonArgs),
    /// Exhaustive per-level expectations and invariant checks; writes levels.csv.
    Enumerate(CommonArgs),
    /// Extract frame atoms from one sampled branch; writes frame.json.
    Frame(CommonArgs),
    /// Report the leakage constant and contraction factor of the instance.
    Alpha(CommonArgs),
    /// Run the invariant check suite on the instance.
    Check(CommonArgs),
}

impl Command {
    fn split(&self) -> (scenario::Subcommand, &CommonArgs) {
        match self {
            Command::Simulate(a) => (scenario::Subcommand::Simulate, a),
            Command::Enumerate(a) => (scenario::Subcommand::Enumerate, a),
            Command::Frame(a) => (scenario::Subcommand::Frame, a),
            Command::Alpha(a) => (scenario::Subcommand::Alpha, a),
            Command::Check(a) => (scenario::Subcommand::Check, a),
        }
    }
}

fn run(sub: scenario::Subcommand, args: &CommonArgs) -> wrflow::Result<bool> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    scenario::apply_overrides(
        &mut cfg,
        args.seed,
        args.mode.as_deref(),
        args.depth,
        args.samples,
    )?;
    let opts = RunOptions {
        out_dir: args.out.clone(),
        threads: args.threads,
    };
    let report = scenario::run_scenario(&cfg, sub, &opts)?;
    for line in &report.lines {
        println!("{line}");
    }
    Ok(report.all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (sub, args) = cli.command.split();
    match run(sub, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
