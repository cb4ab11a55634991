//! Directional criteria on trained desk-scale models, plus the
//! subcommand determinism check.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use probsmooth::analysis::{
    frequency_noise, hessian_max_spectrum, loss_variance_vs_n, median, quantile,
    trace_feature_variance, HessianConfig, PowerIterConfig,
};
use probsmooth::ensembling::{mc_predict, PredictiveDistribution};
use probsmooth::metrics::{accuracy, nll};
use probsmooth::rng::rng_from;
use probsmooth_cli::{run, Command, Invocation};
use rand::seq::index::sample;

use crate::zoo::{Variant, Zoo};
use crate::{ensure, Outcome};

const DROPOUT: u32 = 300;

fn med(values: &[f64]) -> f64 {
    median(values).expect("non-empty")
}

pub fn loss_variance_scaling(zoo: &Zoo) -> Outcome {
    let (model, splits) = zoo.model(Variant::Smooth, DROPOUT, 0);
    let ds = splits.test.head(32).unwrap();
    let table = loss_variance_vs_n(&model, &ds, &[1, 2, 4, 8, 16], 200, 11).unwrap();
    let slope = table.log_log_slope().unwrap();
    let vars: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{:.2e}", r.variance))
        .collect();
    ensure!(
        (-1.2..=-0.8).contains(&slope),
        "slope {slope:.3} outside [-1.2, -0.8]; Var {vars:?}"
    );
    Ok(format!(
        "slope {slope:.3} over N=1..16 with 200 trials; Var {vars:?}"
    ))
}

pub fn feature_variance(zoo: &Zoo) -> Outcome {
    let mut ratios: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seed in 0..8 {
        let (model, splits) = zoo.model(Variant::Smooth, DROPOUT, seed);
        let ds = splits.test.head(32).unwrap();
        let trace = trace_feature_variance(&model, ds.images(), 20, seed).unwrap();
        for i in 0..model.smooth_count() {
            let input = trace
                .get(&format!("stage{i}"))
                .expect("stage record")
                .model_uncertainty;
            let output = trace
                .get(&format!("smooth{i}"))
                .expect("smooth record")
                .model_uncertainty;
            ratios.entry(i).or_default().push(output / input);
        }
    }
    let medians: Vec<f64> = ratios.values().map(|r| med(r)).collect();
    ensure!(!medians.is_empty(), "model has no Smooth layers");
    ensure!(
        medians.iter().all(|&r| r < 1.0),
        "median output/input model-uncertainty ratio per Smooth layer {medians:.3?}"
    );
    Ok(format!(
        "median output/input std ratio per Smooth layer {medians:.3?} over 8 seeds"
    ))
}

const SIZES: [usize; 6] = [1, 2, 5, 10, 25, 50];
const SUBSETS: usize = 200;

/// Test NLL of an `n`-member ensemble, averaged over random `n`-subsets of
/// the cached member pool.
fn expected_nll(dist: &PredictiveDistribution, labels: &[usize], n: usize, seed: u64) -> f64 {
    let pool = dist.members();
    if n == pool.len() {
        return nll(dist.mean(), labels).unwrap();
    }
    let mut rng = rng_from(seed, &[n as u64]);
    let total: f64 = (0..SUBSETS)
        .map(|_| {
            let members = sample(&mut rng, pool.len(), n)
                .iter()
                .map(|i| pool[i].clone())
                .collect();
            nll(
                PredictiveDistribution::uniform(members).unwrap().mean(),
                labels,
            )
            .unwrap()
        })
        .sum();
    total / SUBSETS as f64
}

fn nll_curve(zoo: &Zoo, variant: Variant, seed: u64) -> Vec<f64> {
    let (dist, labels) = zoo.mc_test(variant, seed);
    SIZES
        .iter()
        .map(|&n| expected_nll(&dist, &labels, n, seed))
        .collect()
}

pub fn ensemble_monotonicity(zoo: &Zoo) -> Outcome {
    let curves: Vec<Vec<f64>> = (0..3).map(|s| nll_curve(zoo, Variant::Smooth, s)).collect();
    let medians: Vec<f64> = (0..SIZES.len())
        .map(|j| med(&curves.iter().map(|c| c[j]).collect::<Vec<_>>()))
        .collect();
    for j in 1..SIZES.len() {
        ensure!(
            medians[j] <= medians[j - 1] + 1e-3,
            "median NLL rises from N={} to N={}: {medians:.4?}",
            SIZES[j - 1],
            SIZES[j]
        );
    }
    Ok(format!("median test NLL at N={SIZES:?}: {medians:.4?}"))
}

pub fn smoothing_benefit(zoo: &Zoo) -> Outcome {
    let at = |variant, n: usize| -> Vec<f64> {
        let j = SIZES.iter().position(|&s| s == n).unwrap();
        (0..5).map(|s| nll_curve(zoo, variant, s)[j]).collect()
    };
    let (smooth50, plain50) = (med(&at(Variant::Smooth, 50)), med(&at(Variant::Plain, 50)));
    let (smooth2, plain10) = (med(&at(Variant::Smooth, 2)), med(&at(Variant::Plain, 10)));
    ensure!(
        smooth50 <= plain50,
        "N=50: smooth {smooth50:.4} > plain {plain50:.4}"
    );
    ensure!(
        smooth2 <= plain10,
        "smooth N=2 {smooth2:.4} > plain N=10 {plain10:.4}"
    );
    Ok(format!(
        "median NLL N=50 smooth {smooth50:.4} vs plain {plain50:.4}; smooth N=2 {smooth2:.4} vs plain N=10 {plain10:.4}"
    ))
}

/// Band centres whose bands cover `[0.6 pi, pi]`.
const HIGH_BANDS: [f64; 2] = [0.7 * PI, 0.9 * PI];
const BAND_WIDTH: f64 = 0.2 * PI;
const NOISE_NORM: f64 = 6.0;

fn accuracy_drop(zoo: &Zoo, variant: Variant, seed: u64) -> f64 {
    let (model, splits) = zoo.model(variant, DROPOUT, seed);
    let ds = splits.test.head(200).unwrap();
    let acc = |x: &probsmooth::Tensor| {
        accuracy(mc_predict(&model, x, 10, seed).unwrap().mean(), ds.labels()).unwrap()
    };
    let clean = acc(ds.images());
    let noisy: f64 = HIGH_BANDS
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            acc(&frequency_noise(ds.images(), f, BAND_WIDTH, NOISE_NORM, 500 + i as u64).unwrap())
        })
        .sum::<f64>()
        / HIGH_BANDS.len() as f64;
    clean - noisy
}

pub fn frequency_robustness(zoo: &Zoo) -> Outcome {
    let smooth: Vec<f64> = (0..5)
        .map(|s| accuracy_drop(zoo, Variant::Smooth, s))
        .collect();
    let plain: Vec<f64> = (0..5)
        .map(|s| accuracy_drop(zoo, Variant::Plain, s))
        .collect();
    let (ms, mp) = (med(&smooth), med(&plain));
    ensure!(
        ms < mp,
        "median accuracy drop smooth {ms:.4} >= plain {mp:.4} ({smooth:.3?} vs {plain:.3?})"
    );
    Ok(format!(
        "median accuracy drop under noise at f >= 0.6 pi (L2 norm {NOISE_NORM}): smooth {ms:.4} vs plain {mp:.4}"
    ))
}

fn top_decile(zoo: &Zoo, dropout: u32, seed: u64) -> f64 {
    let (model, splits) = zoo.model(Variant::Smooth, dropout, seed);
    let cfg = HessianConfig {
        batch_size: 16,
        minibatches: 10,
        power: PowerIterConfig {
            k: 1,
            tol: 1e-4,
            max_iter: 50,
        },
        augment: true,
        pad: 2,
        l2_coeff: 5e-4,
    };
    let report = hessian_max_spectrum(&model, &splits.train, &cfg, seed).unwrap();
    quantile(&report.max_eigenvalues(), 0.9).unwrap()
}

pub fn dropout_sharpness(zoo: &Zoo) -> Outcome {
    let high: Vec<f64> = (0..5).map(|s| top_decile(zoo, 300, s)).collect();
    let low: Vec<f64> = (0..5).map(|s| top_decile(zoo, 50, s)).collect();
    let (mh, ml) = (med(&high), med(&low));
    ensure!(mh > ml, "median top-decile max eigenvalue at 0.3 {mh:.3} <= at 0.05 {ml:.3} ({high:.2?} vs {low:.2?})");
    Ok(format!(
        "median top-decile max eigenvalue dropout 0.3 {mh:.3} vs 0.05 {ml:.3}"
    ))
}

fn run_all(config: &Path, out: &Path) -> BTreeMap<String, Vec<u8>> {
    let inv = |command, checkpoint: Option<&Path>| Invocation {
        checkpoint: checkpoint.map(Path::to_path_buf),
        out: Some(out.to_path_buf()),
        ..Invocation::new(command, config)
    };
    run(&inv(Command::Train, None)).unwrap();
    let ckpt = out.join("train/model.ckpt");
    for c in [
        Command::Eval,
        Command::EvalCorruption,
        Command::EvalConsistency,
        Command::AnalyzeFft,
        Command::AnalyzeVariance,
        Command::HessianSpectrum,
        Command::LossVariance,
    ] {
        run(&inv(c, Some(&ckpt))).unwrap();
    }
    let mut files = BTreeMap::new();
    for dir in fs::read_dir(out).unwrap() {
        for f in fs::read_dir(dir.unwrap().path()).unwrap() {
            let f = f.unwrap().path();
            files.insert(
                f.strip_prefix(out).unwrap().display().to_string(),
                fs::read(&f).unwrap(),
            );
        }
    }
    files
}

pub fn determinism(_: &Zoo) -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (run_all(&config, a.path()), run_all(&config, b.path()));
    ensure!(fa.keys().eq(fb.keys()), "different file sets");
    let differing: Vec<&String> = fa.keys().filter(|k| fa[*k] != fb[*k]).collect();
    ensure!(
        differing.is_empty(),
        "files differ between identical runs: {differing:?}"
    );
    Ok(format!(
        "8 subcommands, {} output files byte-identical across two runs",
        fa.len()
    ))
}
