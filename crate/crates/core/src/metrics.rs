//! Accuracy, likelihood, calibration and stability metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::PROB_CLAMP;
use crate::ensembling::{argmax, csv_err, Probs};
use crate::error::{Error, Result};

pub const ECE_BINS: usize = 15;

fn check_labels(probs: &Probs, labels: &[usize], op: &'static str) -> Result<()> {
    if labels.len() != probs.len() {
        return Err(Error::shape(op, &[probs.len()], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.classes()) {
        return Err(Error::invalid(
            op,
            format!("label {bad} out of range for {} classes", probs.classes()),
        ));
    }
    if probs.is_empty() {
        return Err(Error::invalid(op, "no examples"));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class, probabilities clamped
/// at `PROB_CLAMP`.
pub fn nll(probs: &Probs, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels, "nll")?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(PROB_CLAMP).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn accuracy(probs: &Probs, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels, "accuracy")?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| probs.argmax(*i) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Reliability-diagram bin over `(lower, upper]` (the first bin also holds
/// confidence 0).
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

fn bin_index(conf: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut idx = ((conf * b).ceil() as usize).saturating_sub(1).min(bins - 1);
    if idx > 0 && conf <= idx as f64 / b {
        idx -= 1;
    }
    idx
}

pub fn calibration_bins(
    probs: &Probs,
    labels: &[usize],
    bins: usize,
) -> Result<Vec<CalibrationBin>> {
    check_labels(probs, labels, "ece")?;
    if bins == 0 {
        return Err(Error::invalid("ece", "need at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let c = row[pred];
        let b = bin_index(c, bins);
        count[b] += 1;
        conf[b] += c;
        if pred == y {
            hits[b] += 1.0;
        }
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                accuracy: hits[b] / n,
                confidence: conf[b] / n,
            }
        })
        .collect())
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &Probs, labels: &[usize], bins: usize) -> Result<f64> {
    let n = labels.len() as f64;
    Ok(calibration_bins(probs, labels, bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Mean of `p(true) / max p`.
pub fn relative_confidence(probs: &Probs, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels, "relative_confidence")?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let max = row[argmax(row)];
        if max <= 0.0 {
            return Err(Error::invalid("relative_confidence", "all-zero prediction"));
        }
        total += row[y] / max;
    }
    Ok(total / labels.len() as f64)
}

fn check_sequence(frames: &[Probs], op: &'static str) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::invalid(op, "need at least two frames"));
    }
    let first = &frames[0];
    for f in frames {
        if (f.len(), f.classes()) != (first.len(), first.classes()) {
            return Err(Error::shape(
                op,
                &[first.len(), first.classes()],
                &[f.len(), f.classes()],
            ));
        }
    }
    Ok(())
}

/// Fraction of adjacent frame pairs whose predicted class agrees. Each
/// frame holds one row per sequence; the result averages over sequences.
pub fn consistency(frames: &[Probs]) -> Result<f64> {
    check_sequence(frames, "consistency")?;
    let mut agree = 0usize;
    for pair in frames.windows(2) {
        for r in 0..pair[0].len() {
            if pair[0].argmax(r) == pair[1].argmax(r) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / ((frames.len() - 1) * frames[0].len()) as f64)
}

/// Cross-entropy between consecutive frames, `-(1/M) sum f(x_i) . log f(x_{i+1})`.
pub fn cec(frames: &[Probs]) -> Result<f64> {
    check_sequence(frames, "cec")?;
    let mut total = 0.0;
    for pair in frames.windows(2) {
        for r in 0..pair[0].len() {
            total -= pair[0]
                .row(r)
                .iter()
                .zip(pair[1].row(r))
                .map(|(p, q)| p * q.max(PROB_CLAMP).ln())
                .sum::<f64>();
        }
    }
    Ok(total / ((frames.len() - 1) * frames[0].len()) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    /// Ensemble size used for the predictions.
    pub ensemble_size: usize,
    pub config_hash: String,
    /// Hash of the corruption grid settings, when the report has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub corruption: String,
    pub severity: u8,
    pub nll: f64,
    pub error: f64,
    pub ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionAggregate {
    pub corruption: String,
    pub ce: f64,
    pub cnll: f64,
    pub cece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSummary {
    pub mce: f64,
    pub mcnll: f64,
    pub mcece: f64,
    pub per_type: Vec<CorruptionAggregate>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_confidence: Option<f64>,
    pub meta: ReportMeta,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruption: Vec<CorruptionCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregates: Option<CorruptionSummary>,
}

impl MetricsReport {
    /// NLL, accuracy, ECE and relative confidence of one prediction set.
    pub fn evaluate(probs: &Probs, labels: &[usize], meta: ReportMeta) -> Result<Self> {
        Ok(Self {
            nll: Some(nll(probs, labels)?),
            accuracy: Some(accuracy(probs, labels)?),
            ece: Some(ece(probs, labels, ECE_BINS)?),
            relative_confidence: Some(relative_confidence(probs, labels)?),
            meta,
            ..Self::default()
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Flat `section,corruption,severity,metric,value` table.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["section", "corruption", "severity", "metric", "value"])
            .map_err(csv_err)?;
        let scalars = [
            ("nll", self.nll),
            ("accuracy", self.accuracy),
            ("ece", self.ece),
            ("consistency", self.consistency),
            ("cec", self.cec),
            ("relative_confidence", self.relative_confidence),
        ];
        for (name, v) in scalars {
            if let Some(v) = v {
                out.write_record(["clean", "", "", name, &format!("{v:e}")])
                    .map_err(csv_err)?;
            }
        }
        for c in &self.corruption {
            let sev = c.severity.to_string();
            for (name, v) in [("nll", c.nll), ("error", c.error), ("ece", c.ece)] {
                out.write_record(["corruption", &c.corruption, &sev, name, &format!("{v:e}")])
                    .map_err(csv_err)?;
            }
        }
        if let Some(a) = &self.aggregates {
            for t in &a.per_type {
                for (name, v) in [("ce", t.ce), ("cnll", t.cnll), ("cece", t.cece)] {
                    out.write_record(["aggregate", &t.corruption, "", name, &format!("{v:e}")])
                        .map_err(csv_err)?;
                }
            }
            for (name, v) in [("mce", a.mce), ("mcnll", a.mcnll), ("mcece", a.mcece)] {
                out.write_record(["aggregate", "", "", name, &format!("{v:e}")])
                    .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-type ratios of summed corruption error, NLL and ECE against a
/// baseline report over the same grid, plus their means over types.
pub fn corruption_aggregates(
    model: &MetricsReport,
    baseline: &MetricsReport,
) -> Result<CorruptionSummary> {
    let op = "corruption_aggregates";
    if let (Some(a), Some(b)) = (&model.meta.grid_hash, &baseline.meta.grid_hash) {
        if a != b {
            return Err(Error::Report(format!(
                "reports were produced with different corruption grids ({a} vs {b})"
            )));
        }
    }
    if model.corruption.is_empty() {
        return Err(Error::invalid(op, "report has no corruption cells"));
    }
    if model.corruption.len() != baseline.corruption.len() {
        return Err(Error::invalid(
            op,
            format!(
                "grids differ: {} model cells, {} baseline cells",
                model.corruption.len(),
                baseline.corruption.len()
            ),
        ));
    }
    let mut types: Vec<&str> = Vec::new();
    for c in &model.corruption {
        if !types.contains(&c.corruption.as_str()) {
            types.push(&c.corruption);
        }
    }
    let mut per_type = Vec::with_capacity(types.len());
    for ty in types {
        let mut sums = [0.0; 6];
        for c in model.corruption.iter().filter(|c| c.corruption == ty) {
            let base = baseline
                .corruption
                .iter()
                .find(|b| b.corruption == c.corruption && b.severity == c.severity)
                .ok_or_else(|| {
                    Error::invalid(
                        op,
                        format!("baseline lacks cell {} severity {}", ty, c.severity),
                    )
                })?;
            for (k, (m, b)) in [(c.error, base.error), (c.nll, base.nll), (c.ece, base.ece)]
                .into_iter()
                .enumerate()
            {
                sums[2 * k] += m;
                sums[2 * k + 1] += b;
            }
        }
        let ratio = |k: usize, name: &str| {
            if sums[2 * k + 1] == 0.0 {
                Err(Error::invalid(
                    op,
                    format!("baseline {name} for {ty} sums to zero"),
                ))
            } else {
                Ok(sums[2 * k] / sums[2 * k + 1])
            }
        };
        per_type.push(CorruptionAggregate {
            corruption: ty.to_string(),
            ce: ratio(0, "error")?,
            cnll: ratio(1, "nll")?,
            cece: ratio(2, "ece")?,
        });
    }
    let mean = |f: fn(&CorruptionAggregate) -> f64| {
        per_type.iter().map(f).sum::<f64>() / per_type.len() as f64
    };
    Ok(CorruptionSummary {
        mce: mean(|a| a.ce),
        mcnll: mean(|a| a.cnll),
        mcece: mean(|a| a.cece),
        per_type,
    })
}
