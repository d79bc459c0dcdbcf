//! Command-line front end: train, grid-loss, rpn-study, oracle, bench.
//!
//! Exit codes: 0 on success, 1 for runtime failures (a failed oracle
//! check, a diverged run), 2 for usage and config errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use detcore_cli::{cmd_bench, cmd_grid_loss, cmd_oracle, cmd_rpn_study, cmd_train, CliError};

#[derive(Parser)]
#[command(name = "detcore", about = "Synthetic object-detection toolkit")]
struct Cli {
    /// Override the seed (defaults to the config seed, or 0)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress table and summary output
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a detector on the synthetic dataset and write artifacts
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep loss kind against loss weight, reporting AP at IoU 0.5
    GridLoss {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated loss names (default: all six)
        #[arg(long, value_delimiter = ',')]
        losses: Option<Vec<String>>,
        /// Comma-separated loss weights (default: 1,2,5,10)
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Sweep proposal-stage settings, reporting average recall at 1000
    RpnStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a kernel against its brute-force reference
    Oracle {
        #[arg(long)]
        suite: OracleSuite,
    },
    /// Time a kernel on random input
    Bench {
        #[arg(long)]
        kernel: BenchKernel,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleSuite {
    Iou,
    Nms,
    Grad,
    Map,
}

impl OracleSuite {
    fn name(self) -> &'static str {
        match self {
            OracleSuite::Iou => "iou",
            OracleSuite::Nms => "nms",
            OracleSuite::Grad => "grad",
            OracleSuite::Map => "map",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKernel {
    IouMatrix,
    Nms,
    Anchors,
}

impl BenchKernel {
    fn name(self) -> &'static str {
        match self {
            BenchKernel::IouMatrix => "iou_matrix",
            BenchKernel::Nms => "nms",
            BenchKernel::Anchors => "anchors",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train { config, out } => {
            cmd_train(&config, &out, cli.seed, cli.quiet)?;
        }
        Cmd::GridLoss {
            config,
            out,
            losses,
            weights,
        } => {
            cmd_grid_loss(&config, &out, losses, weights, cli.seed, cli.quiet)?;
        }
        Cmd::RpnStudy { config, out } => {
            cmd_rpn_study(&config, &out, cli.seed, cli.quiet)?;
        }
        Cmd::Oracle { suite } => {
            cmd_oracle(suite.name(), cli.seed.unwrap_or(0), cli.quiet)?;
        }
        Cmd::Bench {
            kernel,
            size,
            reps,
            out,
        } => {
            cmd_bench(
                kernel.name(),
                size,
                reps,
                cli.seed.unwrap_or(0),
                out.as_deref(),
                cli.quiet,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
