//! Probes of smoothing behaviour: feature-map variance, Fourier spectra,
//! band-limited noise, neighbour covariance, loss variance across ensemble
//! sizes and the Hessian max-eigenvalue spectrum.

use std::f64::consts::PI;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{flatten, hvp, unflatten_like, Tape, Var};
use crate::data::{augment, Dataset};
use crate::ensembling::{csv_err, PredictiveDistribution, Probs};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{FeatureProbe, Mode, Model};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

/// Spread of one recorded feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVariance {
    pub layer: String,
    /// Mean over positions of the std across stochastic runs.
    pub model_uncertainty: f64,
    /// Mean over images and channels of the spatial std, averaged over runs.
    pub data_uncertainty: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceTrace {
    pub records: Vec<LayerVariance>,
}

impl VarianceTrace {
    pub fn get(&self, layer: &str) -> Option<&LayerVariance> {
        self.records.iter().find(|r| r.layer == layer)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "model_uncertainty", "data_uncertainty"])
            .map_err(csv_err)?;
        for r in &self.records {
            out.write_record([
                r.layer.clone(),
                format!("{:e}", r.model_uncertainty),
                format!("{:e}", r.data_uncertainty),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn spatial_std_mean(t: &Tensor) -> f64 {
    let s = t.shape();
    let plane = s[s.len() - 2..].iter().product::<usize>().max(1);
    let count = (t.numel() / plane).max(1) as f64;
    t.data()
        .chunks(plane)
        .map(|p| {
            let m = p.iter().sum::<f64>() / plane as f64;
            (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64).sqrt()
        })
        .sum::<f64>()
        / count
}

/// Runs `n_runs` stochastic (MC dropout) passes over `x` and summarizes
/// every recorded feature map.
pub fn trace_feature_variance(
    model: &Model,
    x: &Tensor,
    n_runs: usize,
    seed: u64,
) -> Result<VarianceTrace> {
    if n_runs == 0 {
        return Err(Error::invalid(
            "trace_feature_variance",
            "need at least one run",
        ));
    }
    struct Acc {
        mean: Vec<f64>,
        m2: Vec<f64>,
        data: f64,
    }
    let mut names: Vec<String> = Vec::new();
    let mut accs: Vec<Acc> = Vec::new();
    for run in 0..n_runs {
        let mut rng = rng_from(seed, &[stream::MEMBER, run as u64]);
        let mut probe = FeatureProbe::default();
        let single = model.clone().with_mode(Mode::McEval);
        single.predict_probs_probed(x, &mut rng, Some(&mut probe))?;
        if run == 0 {
            names = probe.records.iter().map(|(n, _)| n.clone()).collect();
            accs = probe
                .records
                .iter()
                .map(|(_, t)| Acc {
                    mean: vec![0.0; t.numel()],
                    m2: vec![0.0; t.numel()],
                    data: 0.0,
                })
                .collect();
        }
        let k = (run + 1) as f64;
        for (acc, (_, t)) in accs.iter_mut().zip(&probe.records) {
            for ((m, q), v) in acc.mean.iter_mut().zip(acc.m2.iter_mut()).zip(t.data()) {
                let d = v - *m;
                *m += d / k;
                *q += d * (v - *m);
            }
            acc.data += spatial_std_mean(t);
        }
    }
    let n = n_runs as f64;
    let records = names
        .into_iter()
        .zip(accs)
        .map(|(layer, acc)| {
            let positions = acc.m2.len().max(1) as f64;
            let model_uncertainty =
                acc.m2.iter().map(|q| (q / n).max(0.0).sqrt()).sum::<f64>() / positions;
            LayerVariance {
                layer,
                model_uncertainty,
                data_uncertainty: acc.data / n,
            }
        })
        .collect();
    Ok(VarianceTrace { records })
}

/// Complex values over the trailing two (spatial) axes of a tensor shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub shape: Vec<usize>,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    fn side(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn planes(&self) -> usize {
        let s = self.side();
        self.data.len() / (s * s).max(1)
    }

    pub fn real_part(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|c| c.re).collect())
            .expect("consistent shape")
    }

    /// `plane, ky, kx, re, im` rows in FFT (uncentered) order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["plane", "ky", "kx", "re", "im"])
            .map_err(csv_err)?;
        let s = self.side();
        for (i, c) in self.data.iter().enumerate() {
            let plane = i / (s * s);
            let (ky, kx) = ((i / s) % s, i % s);
            out.write_record([
                plane.to_string(),
                ky.to_string(),
                kx.to_string(),
                format!("{:e}", c.re),
                format!("{:e}", c.im),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn square_side(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape {
        [.., h, w] if h == w && *h > 0 => Ok(*h),
        _ => Err(Error::invalid(
            op,
            format!("expected square spatial maps, got {shape:?}"),
        )),
    }
}

fn fft_planes(data: &mut [Complex64], side: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(side)
    } else {
        planner.plan_fft_forward(side)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); side];
    for plane in data.chunks_mut(side * side) {
        fft.process(plane);
        for x in 0..side {
            for y in 0..side {
                col[y] = plane[y * side + x];
            }
            fft.process(&mut col);
            for y in 0..side {
                plane[y * side + x] = col[y];
            }
        }
    }
    if inverse {
        let scale = 1.0 / (side * side) as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }
}

/// 2-D DFT of every trailing square plane, `F[k] = sum_x f[x] e^{-2 pi i k.x / n}`.
pub fn fft2(feature: &Tensor) -> Result<Spectrum> {
    let side = square_side(feature.shape(), "fft2")?;
    let mut data: Vec<Complex64> = feature
        .data()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft_planes(&mut data, side, false);
    Ok(Spectrum {
        shape: feature.shape().to_vec(),
        data,
    })
}

/// Inverse of [`fft2`], including the `1 / n^2` normalization.
pub fn ifft2(spec: &Spectrum) -> Result<Spectrum> {
    let side = square_side(&spec.shape, "ifft2")?;
    let mut data = spec.data.clone();
    fft_planes(&mut data, side, true);
    Ok(Spectrum {
        shape: spec.shape.clone(),
        data,
    })
}

/// Angular frequency (radians per pixel) of FFT index `k` on an `n`-point
/// axis, in `(-pi, pi]`.
pub fn signed_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    2.0 * PI * k / n as f64
}

/// Frequencies `0 ..= pi` matching [`diagonal_log_amplitude`].
pub fn diagonal_frequencies(side: usize) -> Vec<f64> {
    (0..=side / 2)
        .map(|k| 2.0 * PI * k as f64 / side as f64)
        .collect()
}

/// Log of the amplitude averaged over all planes, sampled along the
/// diagonal `(k, k)` for `k = 0 ..= n/2`.
pub fn diagonal_log_amplitude(spec: &Spectrum) -> Vec<f64> {
    let side = spec.side();
    let planes = spec.planes().max(1) as f64;
    (0..=side / 2)
        .map(|k| {
            let mean = spec
                .data
                .chunks(side * side)
                .map(|p| p[k * side + k].norm())
                .sum::<f64>()
                / planes;
            mean.max(f64::MIN_POSITIVE).ln()
        })
        .collect()
}

/// Radial band `|omega| in [f - w/2, f + w/2]`, clipped to `[0, pi]`, on
/// an `n x n` FFT lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    pub center: f64,
    pub width: f64,
    pub side: usize,
    /// Row-major in FFT (uncentered) order.
    pub grid: Vec<bool>,
}

impl FrequencyMask {
    pub fn new(side: usize, center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || side == 0 {
            return Err(Error::invalid(
                "frequency_mask",
                format!("band width must be positive, got {width}"),
            ));
        }
        let (lo, hi) = (
            (center - width / 2.0).max(0.0),
            (center + width / 2.0).min(PI),
        );
        let mut grid = Vec::with_capacity(side * side);
        for ky in 0..side {
            for kx in 0..side {
                let r = signed_frequency(ky, side).hypot(signed_frequency(kx, side));
                grid.push(r >= lo && r <= hi);
            }
        }
        Ok(Self {
            center,
            width,
            side,
            grid,
        })
    }

    /// The grid with the zero frequency moved to the middle, for display.
    pub fn centered(&self) -> Vec<bool> {
        let n = self.side;
        let h = n / 2;
        (0..n * n)
            .map(|i| {
                let (y, x) = (i / n, i % n);
                self.grid[((y + n - h) % n) * n + (x + n - h) % n]
            })
            .collect()
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|b| **b).count()
    }
}

/// Adds Gaussian noise restricted to one frequency band to every image of
/// `x0` (`[n, c, h, w]`), scaled so each image's added noise has L2 norm
/// `magnitude`. No clipping is applied.
pub fn frequency_noise(
    x0: &Tensor,
    center: f64,
    width: f64,
    magnitude: f64,
    seed: u64,
) -> Result<Tensor> {
    let side = square_side(x0.shape(), "frequency_noise")?;
    let mask = FrequencyMask::new(side, center, width)?;
    if magnitude == 0.0 {
        return Ok(x0.clone());
    }
    if mask.count() == 0 {
        return Err(Error::invalid(
            "frequency_noise",
            "band contains no lattice frequencies",
        ));
    }
    let n = x0.shape().first().copied().unwrap_or(1);
    let per_image = x0.numel() / n.max(1);
    let mut out = x0.data().to_vec();
    for (i, img) in out.chunks_mut(per_image).enumerate() {
        let mut rng = rng_from(seed, &[stream::NOISE, i as u64]);
        let mut delta: Vec<Complex64> = (0..per_image)
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
            .collect();
        fft_planes(&mut delta, side, false);
        for plane in delta.chunks_mut(side * side) {
            for (c, &keep) in plane.iter_mut().zip(&mask.grid) {
                if !keep {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
        fft_planes(&mut delta, side, true);
        let norm = delta.iter().map(|c| c.re * c.re).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(
                "frequency_noise",
                "band-limited noise vanished",
            ));
        }
        for (v, d) in img.iter_mut().zip(&delta) {
            *v += d.re * magnitude / norm;
        }
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Accuracy and NLL of a model under band-limited noise at one frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub frequency: f64,
    pub accuracy: f64,
    pub nll: f64,
}

/// Evaluates `predict` on `ds` perturbed at each centre frequency.
pub fn frequency_robustness<F>(
    ds: &Dataset,
    frequencies: &[f64],
    width: f64,
    magnitude: f64,
    seed: u64,
    predict: F,
) -> Result<Vec<RobustnessPoint>>
where
    F: Fn(&Tensor) -> Result<Probs>,
{
    frequencies
        .iter()
        .map(|&f| {
            let noisy = frequency_noise(ds.images(), f, width, magnitude, seed)?;
            let p = predict(&noisy)?;
            Ok(RobustnessPoint {
                frequency: f,
                accuracy: metrics::accuracy(&p, ds.labels())?,
                nll: metrics::nll(&p, ds.labels())?,
            })
        })
        .collect()
}

/// Per-layer diagonal log amplitudes of recorded feature maps.
pub fn feature_spectra(model: &Model, x: &Tensor, seed: u64) -> Result<Vec<(String, Vec<f64>)>> {
    let mut probe = FeatureProbe::default();
    let mut rng = rng_from(seed, &[stream::MEMBER]);
    model.predict_probs_probed(x, &mut rng, Some(&mut probe))?;
    probe
        .records
        .iter()
        .map(|(name, t)| Ok((name.clone(), diagonal_log_amplitude(&fft2(t)?))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub empirical: f64,
    pub analytic: f64,
    pub standard_error: f64,
}

impl CovarianceCheck {
    pub fn within(&self, standard_errors: f64) -> bool {
        (self.empirical - self.analytic).abs() <= standard_errors * self.standard_error
    }
}

/// Covariance of two adjacent outputs of a size-3 1-D convolution applied
/// to white noise of variance `variance`; analytically
/// `(w1 w2 + w2 w3) variance`.
pub fn neighbor_covariance_check(
    weights: [f64; 3],
    variance: f64,
    samples: usize,
    seed: u64,
) -> Result<CovarianceCheck> {
    if samples < 2 || !(variance >= 0.0) {
        return Err(Error::invalid(
            "neighbor_covariance",
            "need >= 2 samples and variance >= 0",
        ));
    }
    let [w1, w2, w3] = weights;
    let sd = variance.sqrt();
    let mut rng = rng_from(seed, &[stream::NOISE]);
    let mut pairs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x: [f64; 4] = std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        });
        let y1 = w1 * x[0] + w2 * x[1] + w3 * x[2];
        let y2 = w1 * x[1] + w2 * x[2] + w3 * x[3];
        pairs.push((y1, y2));
    }
    let n = samples as f64;
    let m1 = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let m2 = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let prods: Vec<f64> = pairs.iter().map(|(a, b)| (a - m1) * (b - m2)).collect();
    let empirical = prods.iter().sum::<f64>() / (n - 1.0);
    let pm = prods.iter().sum::<f64>() / n;
    let var_prod = prods.iter().map(|p| (p - pm) * (p - pm)).sum::<f64>() / (n - 1.0);
    Ok(CovarianceCheck {
        empirical,
        analytic: (w1 * w2 + w2 * w3) * variance,
        standard_error: (var_prod / n).sqrt(),
    })
}

/// Settings of the power iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIterConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Stop once the relative eigenvalue change drops below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_k() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    100
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenEstimate {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn project_out(v: &mut [f64], basis: &[EigenEstimate]) {
    for e in basis {
        let c = dot(v, &e.vector);
        v.iter_mut().zip(&e.vector).for_each(|(x, u)| *x -= c * u);
    }
}

/// Top-`k` eigenpairs (by magnitude) of the symmetric operator `apply` on
/// `dim`-vectors, deflating found eigenvectors by projection.
pub fn power_iteration<F>(
    mut apply: F,
    dim: usize,
    cfg: &PowerIterConfig,
    seed: u64,
) -> Result<Vec<EigenEstimate>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if cfg.k == 0 || cfg.k > dim || cfg.max_iter == 0 {
        return Err(Error::invalid(
            "power_iteration",
            format!("need 1 <= k <= {dim} and max_iter >= 1, got k = {}", cfg.k),
        ));
    }
    let mut found: Vec<EigenEstimate> = Vec::with_capacity(cfg.k);
    for rank in 0..cfg.k {
        let mut rng = rng_from(seed, &[stream::POWER_ITER, rank as u64]);
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        project_out(&mut v, &found);
        normalize(&mut v);
        let mut value = f64::NAN;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < cfg.max_iter {
            iterations += 1;
            let mut hv = apply(&v)?;
            project_out(&mut hv, &found);
            let next = dot(&v, &hv);
            let change = (next - value).abs();
            value = next;
            if normalize(&mut hv) == 0.0 {
                converged = true;
                break;
            }
            v = hv;
            if change <= cfg.tol * value.abs() {
                converged = true;
                break;
            }
        }
        found.push(EigenEstimate {
            value,
            vector: v,
            iterations,
            converged,
        });
    }
    Ok(found)
}

/// Settings of the Hessian spectrum probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianConfig {
    pub batch_size: usize,
    pub minibatches: usize,
    #[serde(default)]
    pub power: PowerIterConfig,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_pad")]
    pub pad: usize,
    #[serde(default = "default_l2")]
    pub l2_coeff: f64,
}

fn default_true() -> bool {
    true
}

fn default_pad() -> usize {
    2
}

fn default_l2() -> f64 {
    5e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub minibatch: usize,
    pub rank: usize,
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub k: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub l2_coeff: f64,
    /// Loss definition, e.g. `nll+l2`.
    pub loss: String,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<SpectrumRecord>,
}

impl SpectrumReport {
    /// Top eigenvalue of every minibatch, in minibatch order.
    pub fn max_eigenvalues(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.rank == 0)
            .map(|r| r.eigenvalue)
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["minibatch", "rank", "eigenvalue", "iterations", "converged"])
            .map_err(csv_err)?;
        for r in &self.records {
            out.write_record([
                r.minibatch.to_string(),
                r.rank.to_string(),
                format!("{:e}", r.eigenvalue),
                r.iterations.to_string(),
                r.converged.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Regularized training loss `NLL + l2 * |w|^2` of `model` on a fixed
/// batch, with dropout masks drawn from a fresh `mask_seed` stream on
/// every call so the loss is a deterministic function of the weights.
pub fn regularized_loss<'a>(
    model: &'a Model,
    x: &'a Tensor,
    labels: &'a [usize],
    l2_coeff: f64,
    mask_seed: u64,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a {
    move |tape: &mut Tape, params: &[Var]| {
        let mut rng = rng_from(mask_seed, &[stream::DROPOUT]);
        let xv = tape.constant(x.clone());
        let out = model.forward_graph(tape, params, xv, Mode::Train, &mut rng, None)?;
        let mut loss = tape.cross_entropy(out.logits, labels)?;
        if l2_coeff != 0.0 {
            for &p in params {
                let sq = tape.sum_squares(p);
                let reg = tape.scale(sq, l2_coeff);
                loss = tape.add(loss, reg)?;
            }
        }
        Ok(loss)
    }
}

/// One fixed minibatch of the Hessian probe: inputs (augmented when
/// enabled), labels and the seed of its dropout masks.
#[derive(Clone, Debug)]
pub struct HessianBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub mask_seed: u64,
}

/// The first `cfg.minibatches` shuffled minibatches used by
/// [`hessian_max_spectrum`].
pub fn hessian_batches(ds: &Dataset, cfg: &HessianConfig, seed: u64) -> Result<Vec<HessianBatch>> {
    if cfg.batch_size == 0 || cfg.minibatches == 0 {
        return Err(Error::invalid(
            "hessian_spectrum",
            "batch size and minibatch count must be positive",
        ));
    }
    let mut shuffle = rng_from(seed, &[stream::SHUFFLE]);
    let batches = ds.batches(cfg.batch_size, Some(&mut shuffle));
    if batches.len() < cfg.minibatches {
        return Err(Error::invalid(
            "hessian_spectrum",
            format!(
                "dataset yields {} minibatches, {} requested",
                batches.len(),
                cfg.minibatches
            ),
        ));
    }
    batches
        .iter()
        .take(cfg.minibatches)
        .enumerate()
        .map(|(m, rows)| {
            let batch = ds.subset(rows)?;
            let x = if cfg.augment {
                augment(
                    batch.images(),
                    cfg.pad,
                    true,
                    derive_seed(seed, &[stream::AUGMENT, m as u64]),
                )?
            } else {
                batch.images().clone()
            };
            Ok(HessianBatch {
                x,
                labels: batch.labels().to_vec(),
                mask_seed: derive_seed(seed, &[stream::DROPOUT, m as u64]),
            })
        })
        .collect()
}

/// Top-k Hessian eigenvalues of the regularized loss on each of the first
/// `minibatches` shuffled (and optionally augmented) minibatches.
pub fn hessian_max_spectrum(
    model: &Model,
    ds: &Dataset,
    cfg: &HessianConfig,
    seed: u64,
) -> Result<SpectrumReport> {
    let weights = model.params().to_vec();
    let dim = weights.iter().map(Tensor::numel).sum();
    let mut records = Vec::new();
    for (m, batch) in hessian_batches(ds, cfg, seed)?.iter().enumerate() {
        let loss = regularized_loss(
            model,
            &batch.x,
            &batch.labels,
            cfg.l2_coeff,
            batch.mask_seed,
        );
        let apply = |v: &[f64]| -> Result<Vec<f64>> {
            let dir = unflatten_like(v, &weights)?;
            Ok(flatten(&hvp(&loss, &weights, &dir)?))
        };
        let eig = power_iteration(
            apply,
            dim,
            &cfg.power,
            derive_seed(seed, &[stream::POWER_ITER, m as u64]),
        )?;
        let mut vals: Vec<(f64, usize, bool)> = eig
            .iter()
            .map(|e| (e.value, e.iterations, e.converged))
            .collect();
        vals.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (rank, (value, iterations, converged)) in vals.into_iter().enumerate() {
            records.push(SpectrumRecord {
                minibatch: m,
                rank,
                eigenvalue: value,
                iterations,
                converged,
            });
        }
    }
    Ok(SpectrumReport {
        k: cfg.power.k,
        batch_size: cfg.batch_size,
        augment: cfg.augment,
        l2_coeff: cfg.l2_coeff,
        loss: "nll+l2".into(),
        seed,
        config_hash: model.spec().config_hash()?,
        records,
    })
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Ordinary-least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(
            "ols_slope",
            "need two or more paired points",
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("ols_slope", "all x values are equal"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVarianceRow {
    pub n: usize,
    pub mean_loss: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVarianceTable {
    pub trials: usize,
    pub dataset_size: usize,
    pub rows: Vec<LossVarianceRow>,
}

impl LossVarianceTable {
    /// OLS slope of `ln Var` against `ln N`.
    pub fn log_log_slope(&self) -> Result<f64> {
        let xs: Vec<f64> = self.rows.iter().map(|r| (r.n as f64).ln()).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.variance.ln()).collect();
        ols_slope(&xs, &ys)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n", "mean_loss", "variance"])
            .map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.n.to_string(),
                format!("{:e}", r.mean_loss),
                format!("{:e}", r.variance),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Variance across `trials` of the MC-dropout ensemble NLL on `ds`, for
/// each ensemble size in `sizes`. Within a trial, smaller ensembles are
/// prefixes of the largest one.
pub fn loss_variance_vs_n(
    model: &Model,
    ds: &Dataset,
    sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<LossVarianceTable> {
    let max_n = sizes.iter().copied().max().unwrap_or(0);
    if sizes.contains(&0) || max_n == 0 || trials < 2 {
        return Err(Error::invalid(
            "loss_variance",
            "need positive ensemble sizes and >= 2 trials",
        ));
    }
    let mut losses = vec![Vec::with_capacity(trials); sizes.len()];
    for t in 0..trials {
        let trial_seed = derive_seed(seed, &[stream::TRIAL, t as u64]);
        let members = (0..max_n)
            .map(|i| {
                let mut rng = rng_from(trial_seed, &[stream::MEMBER, i as u64]);
                model.predict_in_mode(ds.images(), Mode::McEval, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let dist = PredictiveDistribution::uniform(members)?;
        for (j, &n) in sizes.iter().enumerate() {
            losses[j].push(metrics::nll(dist.prefix(n)?.mean(), ds.labels())?);
        }
    }
    let rows = sizes
        .iter()
        .zip(losses)
        .map(|(&n, l)| {
            let m = l.iter().sum::<f64>() / trials as f64;
            let var = l.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (trials - 1) as f64;
            LossVarianceRow {
                n,
                mean_loss: m,
                variance: var,
            }
        })
        .collect();
    Ok(LossVarianceTable {
        trials,
        dataset_size: ds.len(),
        rows,
    })
}
