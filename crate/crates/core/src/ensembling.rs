//! Predictive distributions, MC dropout, weighted and temporal ensembles.

use std::collections::VecDeque;
use std::io::Write;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;

/// Row-stochastic `[n, classes]` matrix of class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Probs {
    n: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Probs {
    pub fn new(n: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * classes || classes == 0 {
            return Err(Error::shape("probs", &[n, classes], &[data.len()]));
        }
        if data.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid(
                "probs",
                "probabilities must be finite and non-negative",
            ));
        }
        Ok(Self { n, classes, data })
    }

    /// Builds from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("probs", "ragged rows"));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[n, k] => Self::new(n, k, t.data().to_vec()),
            s => Err(Error::invalid(
                "probs",
                format!("expected a 2-D tensor, got {s:?}"),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.classes)
    }

    /// Index of the largest probability; the first one on ties.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.argmax(i)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.classes], self.data.clone()).expect("consistent shape")
    }

    pub fn concat(parts: &[Probs]) -> Result<Self> {
        let classes = parts.first().map_or(0, |p| p.classes);
        if parts.iter().any(|p| p.classes != classes) {
            return Err(Error::invalid("probs", "class counts differ"));
        }
        let n = parts.iter().map(|p| p.n).sum();
        Self::new(
            n,
            classes,
            parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        )
    }

    fn same_shape(&self, other: &Probs, op: &'static str) -> Result<()> {
        if (self.n, self.classes) != (other.n, other.classes) {
            return Err(Error::shape(
                op,
                &[self.n, self.classes],
                &[other.n, other.classes],
            ));
        }
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Weighted mixture of `members`; weights must be non-negative and sum to 1.
pub fn weighted_ensemble(members: &[Probs], weights: &[f64]) -> Result<Probs> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("weighted_ensemble", "no members"))?;
    if weights.len() != members.len() {
        return Err(Error::invalid(
            "weighted_ensemble",
            format!("{} members but {} weights", members.len(), weights.len()),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid(
            "weighted_ensemble",
            "weights must be non-negative",
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "weighted_ensemble",
            format!("weights sum to {total}, expected 1"),
        ));
    }
    let mut data = vec![0.0; first.data.len()];
    for (m, &w) in members.iter().zip(weights) {
        first.same_shape(m, "weighted_ensemble")?;
        for (d, p) in data.iter_mut().zip(&m.data) {
            *d += w * p;
        }
    }
    Probs::new(first.n, first.classes, data)
}

/// Ensemble members with mixture weights and their weighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    members: Vec<Probs>,
    weights: Vec<f64>,
    mean: Probs,
}

impl PredictiveDistribution {
    pub fn new(members: Vec<Probs>, weights: Vec<f64>) -> Result<Self> {
        let mean = weighted_ensemble(&members, &weights)?;
        Ok(Self {
            members,
            weights,
            mean,
        })
    }

    pub fn uniform(members: Vec<Probs>) -> Result<Self> {
        let w = vec![1.0 / members.len().max(1) as f64; members.len()];
        Self::new(members, w)
    }

    pub fn single(p: Probs) -> Result<Self> {
        Self::new(vec![p], vec![1.0])
    }

    pub fn members(&self) -> &[Probs] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> &Probs {
        &self.mean
    }

    pub fn into_mean(self) -> Probs {
        self.mean
    }

    /// Uniform mixture of the first `k` members.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.members.len() {
            return Err(Error::invalid(
                "prefix",
                format!("cannot take {k} of {} members", self.members.len()),
            ));
        }
        Self::uniform(self.members[..k].to_vec())
    }

    /// One row per (sample, member) with `member = "mean"` for the mixture.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["sample".to_string(), "member".to_string()];
        header.extend((0..self.mean.classes).map(|c| format!("p{c}")));
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.mean.n {
            let tagged = self
                .members
                .iter()
                .enumerate()
                .map(|(m, p)| (m.to_string(), p))
                .chain(std::iter::once(("mean".to_string(), &self.mean)));
            for (tag, p) in tagged {
                let mut rec = vec![i.to_string(), tag];
                rec.extend(p.row(i).iter().map(|v| format!("{v:e}")));
                out.write_record(&rec).map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

/// MC dropout: `n_samples` stochastic forward passes averaged with equal
/// weights. Member `i` draws its masks from its own seeded stream, so a
/// smaller ensemble with the same seed is a prefix of a larger one.
pub fn mc_predict(
    model: &Model,
    x: &Tensor,
    n_samples: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if n_samples == 0 {
        return Err(Error::invalid("mc_predict", "need at least one sample"));
    }
    let members = (0..n_samples)
        .map(|i| {
            let mut rng = rng_from(seed, &[stream::MEMBER, i as u64]);
            model.predict_in_mode(x, Mode::McEval, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    PredictiveDistribution::uniform(members)
}

/// Deterministic prediction with dropout disabled.
pub fn deterministic_predict(model: &Model, x: &Tensor) -> Result<Probs> {
    model.predict_in_mode(x, Mode::Eval, &mut rng_from(0, &[]))
}

pub const TEMPORAL_WINDOW: usize = 5;

/// Decay used by default for temporal smoothing, `exp(-0.8)`.
pub fn default_temporal_decay() -> f64 {
    (-0.8f64).exp()
}

/// Sliding buffer of recent predictions combined with exponentially
/// decaying weights, the newest entry weighted highest.
#[derive(Clone, Debug)]
pub struct TemporalBuffer {
    capacity: usize,
    decay: f64,
    frames: VecDeque<Probs>,
}

impl TemporalBuffer {
    pub fn new(capacity: usize, decay: f64) -> Result<Self> {
        if capacity == 0 || !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(
                "temporal_buffer",
                format!("need capacity >= 1 and decay in (0, 1], got {capacity} and {decay}"),
            ));
        }
        Ok(Self {
            capacity,
            decay,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized weights, newest first.
    pub fn weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.frames.len())
            .map(|j| self.decay.powi(j as i32))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    pub fn push(&mut self, p: Probs) -> Result<()> {
        if let Some(last) = self.frames.front() {
            last.same_shape(&p, "temporal_buffer")?;
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_back();
        }
        self.frames.push_front(p);
        Ok(())
    }

    pub fn predict(&self) -> Result<Probs> {
        let members: Vec<Probs> = self.frames.iter().cloned().collect();
        weighted_ensemble(&members, &self.weights())
    }
}

/// Temporally smoothed prediction for every frame of a sequence.
pub fn temporal_smooth(frames: &[Probs], window: usize, decay: f64) -> Result<Vec<Probs>> {
    let mut buf = TemporalBuffer::new(window, decay)?;
    frames
        .iter()
        .map(|f| {
            buf.push(f.clone())?;
            buf.predict()
        })
        .collect()
}

/// NLL of the averaged member probabilities, as opposed to the average of
/// member NLLs.
pub fn train_phase_ensemble_loss(tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| Error::invalid("ensemble_loss", "no members"))?;
    let mut acc = tape.softmax(*first)?;
    for &l in rest {
        let p = tape.softmax(l)?;
        acc = tape.add(acc, p)?;
    }
    let mean = tape.scale(acc, 1.0 / logits.len() as f64);
    tape.nll_loss(mean, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Probs {
        Probs::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn weighted_ensemble_extremes() {
        let a = probs(&[&[0.9, 0.1]]);
        let b = probs(&[&[0.2, 0.8]]);
        assert_eq!(
            weighted_ensemble(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(),
            a
        );
        let mix = weighted_ensemble(&[a, b], &[0.5, 0.5]).unwrap();
        assert!((mix.row(0)[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let a = probs(&[&[0.5, 0.5]]);
        assert!(weighted_ensemble(&[a.clone(), a.clone()], &[0.7, 0.7]).is_err());
        assert!(weighted_ensemble(&[a.clone(), a.clone()], &[1.5, -0.5]).is_err());
        assert!(weighted_ensemble(&[a.clone()], &[0.5, 0.5]).is_err());
        assert!(weighted_ensemble(&[], &[]).is_err());
        let c = probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(weighted_ensemble(&[a, c], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn temporal_buffer_weights_and_eviction() {
        let g = default_temporal_decay();
        let mut buf = TemporalBuffer::new(TEMPORAL_WINDOW, g).unwrap();
        for i in 0..7 {
            buf.push(probs(&[&[i as f64 / 10.0, 1.0 - i as f64 / 10.0]]))
                .unwrap();
        }
        assert_eq!(buf.len(), 5);
        let w = buf.weights();
        let z: f64 = (0..5).map(|j| g.powi(j)).sum();
        for (j, wj) in w.iter().enumerate() {
            assert!((wj - g.powi(j as i32) / z).abs() < 1e-15);
        }
        // newest frame (0.6) leads, oldest retained is 0.2
        let expected: f64 = (0..5).map(|j| w[j] * (6 - j) as f64 / 10.0).sum();
        assert!((buf.predict().unwrap().row(0)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn temporal_smoothing_of_a_constant_stream_is_constant() {
        let p = probs(&[&[0.3, 0.7]]);
        let out = temporal_smooth(&vec![p.clone(); 8], 5, 0.5).unwrap();
        for q in out {
            assert!((q.row(0)[0] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_loss_averages_probabilities_first() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 10.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap());
        let loss = train_phase_ensemble_loss(&mut tape, &[a, b], &[0]).unwrap();
        // mean prob of class 0 is exactly 1/2 by symmetry
        assert!((tape.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn csv_has_member_and_mean_rows() {
        let d = PredictiveDistribution::uniform(vec![probs(&[&[1.0, 0.0]]), probs(&[&[0.0, 1.0]])])
            .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("0,mean,5e-1,5e-1"));
    }
}
