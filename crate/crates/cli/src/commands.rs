//! Subcommand drivers. Each validates its inputs, computes, then writes a
//! TOML summary and CSV tables into its own run directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use probsmooth::analysis::{
    diagonal_frequencies, feature_spectra, frequency_robustness, hessian_max_spectrum,
    loss_variance_vs_n, trace_feature_variance, LossVarianceTable, RobustnessPoint, SpectrumReport,
    VarianceTrace,
};
use probsmooth::data::{shift_sequence, CorruptionGrid, Dataset};
use probsmooth::ensembling::{deterministic_predict, mc_predict, temporal_smooth, Probs};
use probsmooth::metrics::{
    self, corruption_aggregates, CorruptionCell, MetricsReport, ReportMeta, ECE_BINS,
};
use probsmooth::models::is_checkpoint;
use probsmooth::rng::derive_seed;
use probsmooth::train::{self, EpochLog};
use probsmooth::{Error, Model, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Splits};

/// Stream tags for per-subcommand seeds.
mod tag {
    pub const CORRUPT: u64 = 101;
    pub const FFT_NOISE: u64 = 102;
}

fn run_dir(out: &Path, name: &str) -> Result<PathBuf> {
    let dir = out.join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn csv_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Report(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

/// Loads a checkpoint and checks that its model spec matches the config.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let model = Model::load(path)?;
    let want = cfg.model.config_hash()?;
    let got = model.spec().config_hash()?;
    if want != got {
        return Err(Error::Config(format!(
            "checkpoint {} was built from model config {got}, run config has {want}",
            path.display()
        )));
    }
    Ok(model)
}

fn meta(cfg: &RunConfig, ensemble_size: usize) -> Result<ReportMeta> {
    Ok(ReportMeta {
        seed: cfg.seed,
        ensemble_size,
        config_hash: cfg.config_hash()?,
        grid_hash: None,
    })
}

/// Members actually used: one when prediction is deterministic.
pub fn effective_ensemble(cfg: &RunConfig, model: &Model, n: usize) -> usize {
    if cfg.eval.mc && model.spec().dropout_rate > 0.0 {
        n
    } else {
        1
    }
}

fn predict(cfg: &RunConfig, model: &Model, x: &Tensor, n: usize, seed: u64) -> Result<Probs> {
    if effective_ensemble(cfg, model, n) > 1 {
        Ok(mc_predict(model, x, n, seed)?.into_mean())
    } else {
        deterministic_predict(model, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub parameters: usize,
    pub epochs: Vec<EpochLog>,
}

/// Trains from scratch; writes `epoch_NNN.ckpt` after every epoch, then
/// `model.ckpt`, `log.csv` and `summary.toml`. On divergence the epoch
/// checkpoints written so far are kept.
pub fn train(cfg: &RunConfig, splits: &Splits, out: &Path) -> Result<(Model, TrainSummary)> {
    let dir = run_dir(out, "train")?;
    let mut model = Model::build(&cfg.model)?;
    let val = splits.val.as_ref().unwrap_or(&splits.test);
    let logs = train::train(
        &mut model,
        &splits.train,
        Some(val),
        &cfg.train,
        cfg.seed,
        |m, log| m.save(&dir.join(format!("epoch_{:03}.ckpt", log.epoch + 1))),
    )?;
    model.save(&dir.join("model.ckpt"))?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("log.csv"))?);
    w.write_record([
        "epoch",
        "lr",
        "train_nll",
        "train_accuracy",
        "val_nll",
        "val_accuracy",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for l in &logs {
        w.write_record([
            l.epoch.to_string(),
            format!("{:e}", l.lr),
            format!("{:e}", l.train_nll),
            format!("{:e}", l.train_accuracy),
            opt(l.val_nll),
            opt(l.val_accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let summary = TrainSummary {
        seed: cfg.seed,
        config_hash: cfg.config_hash()?,
        model_hash: cfg.model.config_hash()?,
        parameters: model.param_count(),
        epochs: logs,
    };
    write_text(&dir.join("summary.toml"), &to_toml(&summary)?)?;
    Ok((model, summary))
}

/// NLL, accuracy, ECE and relative confidence on the test split.
pub fn eval(cfg: &RunConfig, model: &Model, test: &Dataset, out: &Path) -> Result<MetricsReport> {
    let dir = run_dir(out, "eval")?;
    let n = effective_ensemble(cfg, model, cfg.eval.ensemble_size);
    let report = if n > 1 {
        let dist = mc_predict(model, test.images(), n, cfg.seed)?;
        if cfg.eval.write_predictions {
            dist.write_csv(csv_file(&dir.join("predictions.csv"))?)?;
        }
        MetricsReport::evaluate(dist.mean(), test.labels(), meta(cfg, n)?)?
    } else {
        let p = deterministic_predict(model, test.images())?;
        if cfg.eval.write_predictions {
            probsmooth::PredictiveDistribution::single(p.clone())?
                .write_csv(csv_file(&dir.join("predictions.csv"))?)?;
        }
        MetricsReport::evaluate(&p, test.labels(), meta(cfg, 1)?)?
    };
    write_text(&dir.join("report.toml"), &report.to_toml()?)?;
    report.write_csv(csv_file(&dir.join("report.csv"))?)?;
    Ok(report)
}

/// Where CE/CNLL/CECE denominators come from.
#[derive(Clone, Debug)]
pub enum Baseline {
    Report(MetricsReport),
    Model(Model),
}

impl Baseline {
    /// A checkpoint is recognized by its magic bytes, anything else is
    /// read as a TOML report.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if is_checkpoint(&bytes) {
            Ok(Baseline::Model(Model::read_checkpoint(
                &mut bytes.as_slice(),
            )?))
        } else {
            let text = String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))?;
            Ok(Baseline::Report(MetricsReport::from_toml(&text)?))
        }
    }
}

fn corruption_cells(
    cfg: &RunConfig,
    model: &Model,
    grid: &CorruptionGrid,
) -> Result<MetricsReport> {
    let n = effective_ensemble(cfg, model, cfg.eval.ensemble_size);
    let mut report = MetricsReport {
        meta: ReportMeta {
            grid_hash: Some(cfg.grid_hash()?),
            ..meta(cfg, n)?
        },
        ..MetricsReport::default()
    };
    for (kind, severity, ds) in &grid.cells {
        let p = predict(cfg, model, ds.images(), n, cfg.seed)?;
        report.corruption.push(CorruptionCell {
            corruption: kind.name().to_string(),
            severity: *severity,
            nll: metrics::nll(&p, ds.labels())?,
            error: 1.0 - metrics::accuracy(&p, ds.labels())?,
            ece: metrics::ece(&p, ds.labels(), ECE_BINS)?,
        });
    }
    Ok(report)
}

/// Evaluates every (type, severity) cell; with a baseline also reports
/// CE, CNLL and CECE per type and their means.
pub fn eval_corruption(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    baseline: Option<&Baseline>,
    out: &Path,
) -> Result<MetricsReport> {
    if let Some(Baseline::Report(b)) = baseline {
        let want = cfg.grid_hash()?;
        if b.meta.grid_hash.as_deref() != Some(want.as_str()) {
            return Err(Error::Report(format!(
                "baseline report grid {:?} differs from this run's grid {want}",
                b.meta.grid_hash
            )));
        }
    }
    let dir = run_dir(out, "eval-corruption")?;
    let grid = CorruptionGrid::build(
        test,
        &cfg.corruption.types,
        &cfg.corruption.severities,
        derive_seed(cfg.seed, &[tag::CORRUPT]),
    )?;
    let mut report = corruption_cells(cfg, model, &grid)?;
    let base = match baseline {
        None => None,
        Some(Baseline::Report(b)) => Some(b.clone()),
        Some(Baseline::Model(m)) => Some(corruption_cells(cfg, m, &grid)?),
    };
    if let Some(b) = base {
        report.aggregates = Some(corruption_aggregates(&report, &b)?);
    }
    write_text(&dir.join("report.toml"), &report.to_toml()?)?;
    report.write_csv(csv_file(&dir.join("report.csv"))?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamScores {
    pub consistency: f64,
    pub cec: f64,
    pub nll: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub meta: ReportMeta,
    pub sequences: usize,
    pub frames: usize,
    pub stride: usize,
    pub raw: StreamScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<StreamScores>,
}

fn stream_scores(frames: &[Probs], labels: &[usize]) -> Result<StreamScores> {
    let all = Probs::concat(frames)?;
    let repeated: Vec<usize> = (0..frames.len())
        .flat_map(|_| labels.iter().copied())
        .collect();
    Ok(StreamScores {
        consistency: metrics::consistency(frames)?,
        cec: metrics::cec(frames)?,
        nll: metrics::nll(&all, &repeated)?,
        accuracy: metrics::accuracy(&all, &repeated)?,
    })
}

/// Consistency and CEC over shift sequences of the first test images.
pub fn eval_consistency(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    out: &Path,
) -> Result<ConsistencyReport> {
    let dir = run_dir(out, "eval-consistency")?;
    let c = &cfg.consistency;
    let s = c.sequences.min(test.len());
    let (ch, h, w) = test.image_shape();
    let plane = ch * h * w;
    let mut stacked = vec![Vec::with_capacity(s * plane); c.steps + 1];
    for i in 0..s {
        let img = Tensor::new(
            vec![ch, h, w],
            test.images().data()[i * plane..(i + 1) * plane].to_vec(),
        )?;
        for (t, f) in shift_sequence(&img, c.steps, c.stride)?
            .into_iter()
            .enumerate()
        {
            stacked[t].extend_from_slice(f.data());
        }
    }
    let n = effective_ensemble(cfg, model, cfg.eval.ensemble_size);
    let frames = stacked
        .into_iter()
        .map(|d| predict(cfg, model, &Tensor::new(vec![s, ch, h, w], d)?, n, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let labels = &test.labels()[..s];
    let temporal = if c.temporal {
        Some(stream_scores(
            &temporal_smooth(&frames, c.window, c.decay)?,
            labels,
        )?)
    } else {
        None
    };
    let report = ConsistencyReport {
        meta: meta(cfg, n)?,
        sequences: s,
        frames: c.steps + 1,
        stride: c.stride,
        raw: stream_scores(&frames, labels)?,
        temporal,
    };
    write_text(&dir.join("report.toml"), &to_toml(&report)?)?;
    let mut wtr = csv::Writer::from_writer(csv_file(&dir.join("frames.csv"))?);
    wtr.write_record(["frame", "accuracy", "nll"])
        .map_err(csv_err)?;
    for (t, f) in frames.iter().enumerate() {
        wtr.write_record([
            t.to_string(),
            format!("{:e}", metrics::accuracy(f, labels)?),
            format!("{:e}", metrics::nll(f, labels)?),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FftReport {
    pub meta: ReportMeta,
    pub images: usize,
    pub width: f64,
    pub magnitude: f64,
    pub clean_accuracy: f64,
    pub clean_nll: f64,
    pub points: Vec<RobustnessPoint>,
}

/// Accuracy under band-limited noise at each centre frequency, and the
/// diagonal log-amplitude spectrum of every recorded feature map.
pub fn analyze_fft(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    out: &Path,
) -> Result<FftReport> {
    let dir = run_dir(out, "analyze-fft")?;
    let f = &cfg.fft;
    let ds = test.head(f.images.min(test.len()))?;
    let n = effective_ensemble(cfg, model, f.ensemble_size);
    let clean = predict(cfg, model, ds.images(), n, cfg.seed)?;
    let points = frequency_robustness(
        &ds,
        &f.frequencies,
        f.width,
        f.magnitude,
        derive_seed(cfg.seed, &[tag::FFT_NOISE]),
        |x| predict(cfg, model, x, n, cfg.seed),
    )?;
    let report = FftReport {
        meta: meta(cfg, n)?,
        images: ds.len(),
        width: f.width,
        magnitude: f.magnitude,
        clean_accuracy: metrics::accuracy(&clean, ds.labels())?,
        clean_nll: metrics::nll(&clean, ds.labels())?,
        points,
    };
    write_text(&dir.join("report.toml"), &to_toml(&report)?)?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("robustness.csv"))?);
    w.write_record(["frequency", "accuracy", "nll"])
        .map_err(csv_err)?;
    for p in &report.points {
        w.write_record([
            format!("{:e}", p.frequency),
            format!("{:e}", p.accuracy),
            format!("{:e}", p.nll),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let probe = ds.head(ds.len().min(cfg.variance.images))?;
    let spectra = feature_spectra(model, probe.images(), cfg.seed)?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("feature_spectra.csv"))?);
    w.write_record(["layer", "k", "frequency", "log_amplitude"])
        .map_err(csv_err)?;
    for (layer, amps) in &spectra {
        let freqs = diagonal_frequencies(2 * (amps.len() - 1).max(1));
        for (k, a) in amps.iter().enumerate() {
            let fk = freqs.get(k).copied().unwrap_or(0.0);
            w.write_record([
                layer.clone(),
                k.to_string(),
                format!("{fk:e}"),
                format!("{a:e}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub meta: ReportMeta,
    pub images: usize,
    pub trace: VarianceTrace,
}

/// Model and data uncertainty of every recorded feature map.
pub fn analyze_variance(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    out: &Path,
) -> Result<VarianceReport> {
    let dir = run_dir(out, "analyze-variance")?;
    let ds = test.head(cfg.variance.images.min(test.len()))?;
    let trace = trace_feature_variance(model, ds.images(), cfg.variance.runs, cfg.seed)?;
    let report = VarianceReport {
        meta: meta(cfg, cfg.variance.runs)?,
        images: ds.len(),
        trace,
    };
    write_text(&dir.join("report.toml"), &to_toml(&report)?)?;
    report
        .trace
        .write_csv(csv_file(&dir.join("variance.csv"))?)?;
    Ok(report)
}

/// Top-k Hessian eigenvalues of the regularized loss on training
/// minibatches.
pub fn hessian_spectrum(
    cfg: &RunConfig,
    model: &Model,
    train_set: &Dataset,
    out: &Path,
) -> Result<SpectrumReport> {
    let dir = run_dir(out, "hessian-spectrum")?;
    let mut report = hessian_max_spectrum(model, train_set, &cfg.hessian, cfg.seed)?;
    report.config_hash = cfg.config_hash()?;
    write_text(&dir.join("report.toml"), &report.to_toml()?)?;
    report.write_csv(csv_file(&dir.join("spectrum.csv"))?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVarianceReport {
    pub meta: ReportMeta,
    pub log_log_slope: f64,
    pub table: LossVarianceTable,
}

/// Variance of the ensemble NLL across trials for each ensemble size.
pub fn loss_variance(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    out: &Path,
) -> Result<LossVarianceReport> {
    let lv = &cfg.loss_variance;
    let ds = test.head(lv.images.min(test.len()))?;
    let dir = run_dir(out, "loss-variance")?;
    let table = loss_variance_vs_n(model, &ds, &lv.sizes, lv.trials, cfg.seed)?;
    let slope = if lv.sizes.len() >= 2 && table.rows.iter().all(|r| r.variance > 0.0) {
        table.log_log_slope()?
    } else {
        f64::NAN
    };
    let report = LossVarianceReport {
        meta: meta(cfg, lv.sizes.iter().copied().max().unwrap_or(1))?,
        log_log_slope: slope,
        table,
    };
    write_text(&dir.join("report.toml"), &to_toml(&report)?)?;
    report
        .table
        .write_csv(csv_file(&dir.join("loss_variance.csv"))?)?;
    Ok(report)
}
