#![allow(dead_code)]

use probsmooth::rng::rng_from;
use probsmooth::Tensor;
use rand::Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed, &[1000]);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng_from(seed, &[1001]);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central differences of `f` with respect to every entry of every tensor.
pub fn fd_grad(f: &dyn Fn(&[Tensor]) -> f64, ws: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    (0..ws.len())
        .map(|t| {
            (0..ws[t].numel())
                .map(|i| {
                    let mut p = ws.to_vec();
                    p[t].data_mut()[i] += h;
                    let mut m = ws.to_vec();
                    m[t].data_mut()[i] -= h;
                    (f(&p) - f(&m)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `|a - b|_inf / max(|a|_inf, |b|_inf)` with a floor on the scale.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(1e-6, |m: f64, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
