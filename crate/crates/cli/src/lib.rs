//! Config-driven operator surface over the `probsmooth` library.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
use probsmooth::{Error, Model, Result};

use commands::Baseline;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    EvalCorruption,
    EvalConsistency,
    AnalyzeFft,
    AnalyzeVariance,
    HessianSpectrum,
    LossVariance,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::EvalCorruption => "eval-corruption",
            Command::EvalConsistency => "eval-consistency",
            Command::AnalyzeFft => "analyze-fft",
            Command::AnalyzeVariance => "analyze-variance",
            Command::HessianSpectrum => "hessian-spectrum",
            Command::LossVariance => "loss-variance",
        }
    }
}

/// One subcommand call with its common flags.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
}

impl Invocation {
    pub fn new(command: Command, config: impl Into<PathBuf>) -> Self {
        Self {
            command,
            config: config.into(),
            checkpoint: None,
            seed: None,
            out: None,
            baseline: None,
        }
    }
}

/// Loads the config, applies flag overrides and validates it together
/// with the checkpoint and baseline. Nothing is written.
pub fn prepare(inv: &Invocation) -> Result<(RunConfig, Option<Model>, Option<Baseline>, PathBuf)> {
    let mut cfg = RunConfig::load(&inv.config)?;
    if let Some(seed) = inv.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &inv.baseline {
        cfg.corruption.baseline = Some(b.clone());
    }
    cfg.validate()?;
    let model = match (inv.command, &inv.checkpoint) {
        (Command::Train, _) => None,
        (_, Some(path)) => Some(commands::load_checkpoint(&cfg, path)?),
        (_, None) => {
            return Err(Error::Config(format!(
                "{} needs --checkpoint",
                inv.command.name()
            )));
        }
    };
    let baseline = match (inv.command, &cfg.corruption.baseline) {
        (Command::EvalCorruption, Some(path)) => Some(Baseline::load(path)?),
        _ => None,
    };
    let out = inv
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, model, baseline, out))
}

/// Runs one subcommand and returns its run directory.
pub fn run(inv: &Invocation) -> Result<PathBuf> {
    let (cfg, model, baseline, out) = prepare(inv)?;
    let splits = cfg.load_data()?;
    execute(
        inv.command,
        &cfg,
        model.as_ref(),
        baseline.as_ref(),
        &splits,
        &out,
    )?;
    Ok(out.join(inv.command.name()))
}

fn execute(
    command: Command,
    cfg: &RunConfig,
    model: Option<&Model>,
    baseline: Option<&Baseline>,
    splits: &config::Splits,
    out: &Path,
) -> Result<()> {
    let need =
        || model.ok_or_else(|| Error::Config(format!("{} needs a checkpoint", command.name())));
    match command {
        Command::Train => commands::train(cfg, splits, out).map(|_| ()),
        Command::Eval => commands::eval(cfg, need()?, &splits.test, out).map(|_| ()),
        Command::EvalCorruption => {
            commands::eval_corruption(cfg, need()?, &splits.test, baseline, out).map(|_| ())
        }
        Command::EvalConsistency => {
            commands::eval_consistency(cfg, need()?, &splits.test, out).map(|_| ())
        }
        Command::AnalyzeFft => commands::analyze_fft(cfg, need()?, &splits.test, out).map(|_| ()),
        Command::AnalyzeVariance => {
            commands::analyze_variance(cfg, need()?, &splits.test, out).map(|_| ())
        }
        Command::HessianSpectrum => {
            commands::hessian_spectrum(cfg, need()?, &splits.train, out).map(|_| ())
        }
        Command::LossVariance => {
            commands::loss_variance(cfg, need()?, &splits.test, out).map(|_| ())
        }
    }
}
