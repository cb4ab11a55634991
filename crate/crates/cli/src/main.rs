use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probsmooth_cli::{run, Command, Invocation};

#[derive(Parser)]
#[command(
    name = "probsmooth",
    version,
    about = "Train, evaluate and analyze smoothed MC-dropout CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Model checkpoint; required by every subcommand except train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; reports go to a per-subcommand subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints, a per-epoch log and a summary.
    Train(Common),
    /// Clean test metrics: NLL, ECE, accuracy.
    Eval(Common),
    /// Error, NLL and ECE over the corruption grid, plus CE/CNLL/CECE with --baseline.
    EvalCorruption {
        #[command(flatten)]
        common: Common,
        /// Baseline report or checkpoint for CE/CNLL/CECE.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Consistency and CEC on translated frame sequences.
    EvalConsistency(Common),
    /// Accuracy under band-limited noise and feature power spectra.
    AnalyzeFft(Common),
    /// Per-layer MC-dropout feature variance.
    AnalyzeVariance(Common),
    /// Largest Hessian eigenvalue per training minibatch.
    HessianSpectrum(Common),
    /// Loss variance against ensemble size.
    LossVariance(Common),
}

fn invocation(command: Command, c: Common) -> Invocation {
    Invocation {
        command,
        config: c.config,
        checkpoint: c.checkpoint,
        seed: c.seed,
        out: c.out,
        baseline: None,
    }
}

fn main() -> ExitCode {
    let inv = match Cli::parse().command {
        Cmd::Train(c) => invocation(Command::Train, c),
        Cmd::Eval(c) => invocation(Command::Eval, c),
        Cmd::EvalCorruption { common, baseline } => Invocation {
            baseline,
            ..invocation(Command::EvalCorruption, common)
        },
        Cmd::EvalConsistency(c) => invocation(Command::EvalConsistency, c),
        Cmd::AnalyzeFft(c) => invocation(Command::AnalyzeFft, c),
        Cmd::AnalyzeVariance(c) => invocation(Command::AnalyzeVariance, c),
        Cmd::HessianSpectrum(c) => invocation(Command::HessianSpectrum, c),
        Cmd::LossVariance(c) => invocation(Command::LossVariance, c),
    };
    match run(&inv) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
