use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swe2d::harness::{exit_code, merge_files, run, ExperimentConfig, ExperimentKind, RunOptions, RunStatus};

/// Stochastic wave equation experiments.
///
/// Exit codes: 0 success, 2 invalid input, 3 numerical failure,
/// 4 inconclusive or failed statistical check.
#[derive(Parser)]
#[command(name = "swe2d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for replica-level parallelism.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Continue from the partial batch in the output directory.
    #[arg(long)]
    resume: bool,
    /// Output directory, overriding `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    Constants(RunArgs),
    Kernels(RunArgs),
    NoiseCheck(RunArgs),
    Simulate(RunArgs),
    Clt(RunArgs),
    RateStudy(RunArgs),
    MalliavinCheck(RunArgs),
    /// Combine batch.json files from disjoint replica ranges.
    Merge {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        parts: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Constants(a) => (ExperimentKind::Constants, a),
        Command::Kernels(a) => (ExperimentKind::Kernels, a),
        Command::NoiseCheck(a) => (ExperimentKind::NoiseCheck, a),
        Command::Simulate(a) => (ExperimentKind::Simulate, a),
        Command::Clt(a) => (ExperimentKind::Clt, a),
        Command::RateStudy(a) => (ExperimentKind::RateStudy, a),
        Command::MalliavinCheck(a) => (ExperimentKind::MalliavinCheck, a),
        Command::Merge { out, parts } => return finish(merge_files(&parts, &out)),
    };
    let outcome = ExperimentConfig::load(&args.config).and_then(|mut config| {
        if let Some(out) = args.out {
            config.output = out;
        }
        run(
            kind,
            &config,
            RunOptions {
                workers: args.workers,
                resume: args.resume,
            },
        )
    });
    finish(outcome)
}

fn finish(outcome: swe2d::Result<swe2d::harness::RunOutcome>) -> ExitCode {
    match outcome {
        Ok(o) => {
            for p in &o.artifacts {
                println!("wrote {}", p.display());
            }
            match o.status {
                RunStatus::Success => ExitCode::SUCCESS,
                RunStatus::Inconclusive => {
                    eprintln!("statistical checks were inconclusive or failed; see the report");
                    ExitCode::from(4)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
