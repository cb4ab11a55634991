//! Criteria checked against independent oracles: finite differences,
//! closed forms, dense eigendecomposition and brute-force metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use probsmooth::analysis::{
    fft2, hessian_batches, hessian_max_spectrum, neighbor_covariance_check, power_iteration,
    regularized_loss, signed_frequency, HessianConfig, PowerIterConfig,
};
use probsmooth::autograd::{
    flatten, hvp, unflatten_like, value_and_grad, PadMode, PoolKind, Tape, Var,
};
use probsmooth::data::Dataset;
use probsmooth::ensembling::Probs;
use probsmooth::metrics::{
    accuracy, cec, consistency, corruption_aggregates, ece, nll, relative_confidence,
    CorruptionCell, MetricsReport, ECE_BINS,
};
use probsmooth::models::{Activation, Classifier, Mode, Model, ModelSpec};
use probsmooth::rng::rng_from;
use probsmooth::smoothing::{blur, prob, smooth, BlurKernel, ProbConfig, ProbVariant};
use probsmooth::{Result, Tensor};
use rand::Rng;

use crate::zoo::Zoo;
use crate::{ensure, Outcome};

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng_from(seed, &[2000]);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

type LossFn<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

/// Worst relative error between reverse-mode and central-difference
/// gradients over all inputs.
fn fd_error(loss: &LossFn, inputs: &[Tensor]) -> f64 {
    let h = 1e-6;
    let (_, grads) = value_and_grad(loss, inputs).unwrap();
    let value = |ws: &[Tensor]| value_and_grad(loss, ws).unwrap().0;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        analytic.extend_from_slice(g.data());
        for i in 0..inputs[t].numel() {
            let mut p = inputs.to_vec();
            p[t].data_mut()[i] += h;
            let mut m = inputs.to_vec();
            m[t].data_mut()[i] -= h;
            numeric.push((value(&p) - value(&m)) / (2.0 * h));
        }
    }
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(1e-6, |m: f64, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// `sum(r * layer(x))` with a fixed random `r`.
fn probe<'a>(layer: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a) -> LossFn<'a> {
    Box::new(move |tape, vars| {
        let y = layer(tape, vars)?;
        let n: usize = tape.shape(y).iter().product();
        let r = uniform(&[n], -1.0, 1.0, 99).into_data();
        let z = tape.mul_const(y, r)?;
        Ok(tape.sum(z))
    })
}

pub fn gradient_suite(_: &Zoo) -> Outcome {
    let mut cases: Vec<(String, LossFn, Vec<Tensor>)> = Vec::new();
    for k in [
        &[1.0, 1.0][..],
        &[1.0, 2.0, 1.0],
        &[1.0, 4.0, 6.0, 4.0, 1.0],
    ] {
        for pad in [PadMode::Replicate, PadMode::Zero] {
            for variant in [
                ProbVariant::TanhTau,
                ProbVariant::Relu6,
                ProbVariant::ConstantScale,
            ] {
                let cfg = ProbConfig::new(variant, 2.0).unwrap();
                let kernel = BlurKernel::new(k).unwrap();
                cases.push((
                    format!("smooth {k:?} {pad:?} {variant:?}"),
                    probe(move |t, v| smooth(t, v[0], &cfg, &kernel, pad)),
                    vec![uniform(&[2, 2, 5, 5], -8.0, 8.0, 1)],
                ));
            }
        }
    }
    let cfg = ProbConfig::default();
    cases.push((
        "prob".into(),
        probe(move |t, v| prob(t, v[0], &cfg)),
        vec![uniform(&[30], -30.0, 30.0, 2)],
    ));
    let k = BlurKernel::box2();
    cases.push((
        "blur".into(),
        probe(move |t, v| blur(t, v[0], &k, PadMode::Replicate)),
        vec![uniform(&[1, 2, 4, 4], -1.0, 1.0, 3)],
    ));
    cases.push((
        "batch norm".into(),
        probe(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)),
        vec![
            uniform(&[4, 3, 3, 3], -1.0, 1.0, 4),
            uniform(&[3], 0.5, 1.5, 5),
            uniform(&[3], -1.0, 1.0, 6),
        ],
    ));
    cases.push((
        "batch norm eval".into(),
        probe(|t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)),
        vec![
            uniform(&[2, 2, 3, 3], -1.0, 1.0, 7),
            uniform(&[2], 0.5, 1.5, 8),
            uniform(&[2], -1.0, 1.0, 9),
        ],
    ));
    for kind in [PoolKind::Avg, PoolKind::Max, PoolKind::Median] {
        cases.push((
            format!("{kind:?} pool"),
            probe(move |t, v| t.pool2d(v[0], kind, (3, 3), 1, 1)),
            vec![uniform(&[2, 2, 5, 5], -1.0, 1.0, 10)],
        ));
    }
    cases.push((
        "conv2d".into(),
        probe(|t, v| t.conv2d(v[0], v[1], 2, 1)),
        vec![
            uniform(&[2, 2, 6, 6], -1.0, 1.0, 11),
            uniform(&[3, 2, 3, 3], -1.0, 1.0, 12),
        ],
    ));
    cases.push((
        "linear".into(),
        probe(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.add_bias(y, v[2])
        }),
        vec![
            uniform(&[3, 4], -1.0, 1.0, 13),
            uniform(&[4, 2], -1.0, 1.0, 14),
            uniform(&[2], -1.0, 1.0, 15),
        ],
    ));
    cases.push((
        "cross entropy".into(),
        Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[1, 0, 2])),
        vec![uniform(&[3, 3], -2.0, 2.0, 16)],
    ));
    for (classifier, activation) in [
        (Classifier::Gap, Activation::Post),
        (Classifier::Gmedp, Activation::Pre),
    ] {
        let mut spec = ModelSpec::reference(3).with_seed(5);
        spec.input_size = 6;
        spec.stem_channels = Some(2);
        spec.stages[0].channels = 2;
        spec.stages[1].channels = 3;
        spec.classifier = classifier;
        spec.activation = activation;
        let model = Model::build(&spec).unwrap();
        let x = uniform(&[2, 3, 6, 6], 0.0, 1.0, 17);
        let weights = model.params().to_vec();
        let loss: LossFn = Box::new(move |tape, params| {
            let mut rng = rng_from(3, &[]);
            let xv = tape.constant(x.clone());
            let out = model.forward_graph(tape, params, xv, Mode::Train, &mut rng, None)?;
            tape.cross_entropy(out.logits, &[0, 2])
        });
        cases.push((
            format!("model {classifier:?}/{activation:?}"),
            loss,
            weights,
        ));
    }
    let mut worst = (0.0, String::new());
    for (name, loss, inputs) in &cases {
        let err = fd_error(loss, inputs);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    ensure!(
        worst.0 < 1e-4,
        "{}: relative error {:.2e}",
        worst.1,
        worst.0
    );
    Ok(format!(
        "{} layer checks, worst relative error {:.2e} ({})",
        cases.len(),
        worst.0,
        worst.1
    ))
}

pub fn kernel_exactness(_: &Zoo) -> Outcome {
    for k in [
        &[1.0][..],
        &[1.0, 1.0],
        &[1.0, 2.0, 1.0],
        &[1.0, 4.0, 6.0, 4.0, 1.0],
    ] {
        let s: f64 = k.iter().sum();
        let want: Vec<f64> = k
            .iter()
            .flat_map(|a| k.iter().map(move |b| a * b / (s * s)))
            .collect();
        let got = BlurKernel::new(k).unwrap().kernel_2d().to_vec();
        ensure!(got == want, "kernel {k:?}: {got:?} vs {want:?}");
    }
    let side = 16;
    let mut x = Tensor::zeros(&[1, 1, side, side]);
    x.data_mut()[(side / 2) * side + side / 2] = 1.0;
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = blur(&mut tape, v, &BlurKernel::box2(), PadMode::Zero).unwrap();
    let spec = fft2(tape.value(y)).unwrap();
    let mut worst: f64 = 0.0;
    for ky in 0..side {
        for kx in 0..side {
            let want = (signed_frequency(kx, side) / 2.0).cos().abs()
                * (signed_frequency(ky, side) / 2.0).cos().abs();
            worst = worst.max((spec.data[ky * side + kx].norm() - want).abs());
        }
    }
    ensure!(
        worst < 1e-6,
        "box-blur response deviates from |cos(w/2)| by {worst:e}"
    );
    let nyquist = spec.data[(side / 2) * side + side / 2].norm();
    ensure!(nyquist < 0.05, "Nyquist corner response {nyquist}");
    Ok(format!(
        "4 kernels exact, response error {worst:.1e}, Nyquist corner {nyquist:.1e}"
    ))
}

fn quadratic_eigs(k: usize, tol: f64) -> Vec<f64> {
    // Q diag(3, 2, 1) Q^T with an orthogonal Q
    let q = DMatrix::from_row_slice(3, 3, &[2.0, -2.0, 1.0, 2.0, 1.0, -2.0, 1.0, 2.0, 2.0]) / 3.0;
    let a = &q
        * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]))
        * q.transpose();
    let a_t = Tensor::new(vec![3, 3], a.as_slice().to_vec()).unwrap();
    let loss = move |tape: &mut Tape, w: &[Var]| -> Result<Var> {
        let row = tape.reshape(w[0], &[1, 3])?;
        let av = tape.constant(a_t.clone());
        let aw = tape.matmul(row, av)?;
        let aw = tape.reshape(aw, &[3])?;
        let quad = tape.mul(aw, w[0])?;
        let s = tape.sum(quad);
        Ok(tape.scale(s, 0.5))
    };
    let w = vec![Tensor::new(vec![3], vec![0.4, 0.1, -0.3]).unwrap()];
    let apply =
        |v: &[f64]| -> Result<Vec<f64>> { Ok(flatten(&hvp(&loss, &w, &unflatten_like(v, &w)?)?)) };
    let cfg = PowerIterConfig {
        k,
        tol,
        max_iter: 1000,
    };
    power_iteration(apply, 3, &cfg, 0)
        .unwrap()
        .iter()
        .map(|e| e.value)
        .collect()
}

fn dense_hessian(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, ws: &[Tensor]) -> DMatrix<f64> {
    let flat = flatten(ws);
    let h = 1e-4;
    let value = |w: &[f64]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = unflatten_like(w, ws)
            .unwrap()
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.value(l).item().unwrap()
    };
    let at = |i: usize, si: f64, j: usize, sj: f64| {
        let mut w = flat.clone();
        w[i] += si;
        w[j] += sj;
        value(&w)
    };
    DMatrix::from_fn(flat.len(), flat.len(), |i, j| {
        (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) / (4.0 * h * h)
    })
}

pub fn hessian_oracle(_: &Zoo) -> Outcome {
    let top = quadratic_eigs(2, 1e-10);
    ensure!(
        (top[0] - 3.0).abs() < 1e-6 && (top[1] - 2.0).abs() < 1e-6,
        "quadratic fixture gave {top:?}"
    );

    let spec = ModelSpec {
        input_channels: 1,
        input_size: 3,
        classes: 2,
        stem_channels: None,
        dropout_rate: 0.0,
        classifier: Classifier::Mlp,
        mlp_hidden: Some(3),
        mlp_dropout: 0.3,
        activation: Activation::Post,
        init_seed: 9,
        stages: Vec::new(),
        smoothing: None,
    };
    let model = Model::build(&spec).unwrap();
    ensure!(
        model.param_count() <= 50,
        "{} parameters",
        model.param_count()
    );
    let ds = Dataset::new(
        uniform(&[32, 1, 3, 3], 0.0, 1.0, 21),
        (0..32).map(|i| (i * 5 / 3) % 2).collect(),
        2,
        "fixture",
    )
    .unwrap();
    let cfg = HessianConfig {
        batch_size: 16,
        minibatches: 2,
        power: PowerIterConfig::default(),
        augment: true,
        pad: 1,
        l2_coeff: 5e-4,
    };
    let report = hessian_max_spectrum(&model, &ds, &cfg, 4).unwrap();
    let mut worst: f64 = 0.0;
    for (m, b) in hessian_batches(&ds, &cfg, 4).unwrap().iter().enumerate() {
        let loss = regularized_loss(&model, &b.x, &b.labels, cfg.l2_coeff, b.mask_seed);
        let eig = SymmetricEigen::new(dense_hessian(&loss, model.params()));
        let dominant = eig
            .eigenvalues
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap();
        worst = worst.max(((report.max_eigenvalues()[m] - dominant) / dominant).abs());
    }
    ensure!(
        worst < 1e-4,
        "tiny MLP top eigenvalue relative error {worst:e}"
    );
    Ok(format!(
        "quadratic top-2 {:.9}/{:.9}, MLP ({} params) relative error {worst:.1e}",
        top[0],
        top[1],
        model.param_count()
    ))
}

pub fn covariance_formula(_: &Zoo) -> Outcome {
    let mut rng = rng_from(2024, &[]);
    let w: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let c = neighbor_covariance_check(w, 1.0, 100_000, 5).unwrap();
    let z = (c.empirical - c.analytic) / c.standard_error;
    ensure!(
        c.within(3.0),
        "empirical {} vs analytic {} ({z:.2} standard errors)",
        c.empirical,
        c.analytic
    );
    Ok(format!(
        "kernel {w:.3?}: empirical {:.5}, analytic {:.5}, {z:+.2} SE",
        c.empirical, c.analytic
    ))
}

fn fixture(n: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng_from(seed, &[3000]);
    let rows = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(2)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    (rows, (0..n).map(|_| rng.gen_range(0..k)).collect())
}

fn top1(r: &[f64]) -> (usize, f64) {
    r.iter()
        .enumerate()
        .fold((0, r[0]), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
}

pub fn metric_oracles(_: &Zoo) -> Outcome {
    let tol = 1e-12;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (rows, labels) = fixture(100, 6, seed);
        let p = Probs::from_rows(&rows).unwrap();
        let n = rows.len() as f64;
        let o_nll = rows
            .iter()
            .zip(&labels)
            .map(|(r, &y)| -r[y].max(1e-12).ln())
            .sum::<f64>()
            / n;
        let mut o_ece = 0.0;
        for b in 0..ECE_BINS {
            let (lo, hi) = (b as f64 / ECE_BINS as f64, (b + 1) as f64 / ECE_BINS as f64);
            let members: Vec<(usize, f64, usize)> = rows
                .iter()
                .zip(&labels)
                .map(|(r, &y)| (top1(r).0, top1(r).1, y))
                .filter(|&(_, c, _)| c > lo && c <= hi)
                .collect();
            if !members.is_empty() {
                let m = members.len() as f64;
                let acc = members.iter().filter(|(p, _, y)| p == y).count() as f64 / m;
                let conf = members.iter().map(|x| x.1).sum::<f64>() / m;
                o_ece += m / n * (acc - conf).abs();
            }
        }
        let o_rel = rows
            .iter()
            .zip(&labels)
            .map(|(r, &y)| r[y] / top1(r).1)
            .sum::<f64>()
            / n;
        let o_acc = rows
            .iter()
            .zip(&labels)
            .filter(|(r, &y)| top1(r).0 == y)
            .count() as f64
            / n;
        let frames: Vec<Probs> = rows
            .iter()
            .map(|r| Probs::from_rows(&[r.clone()]).unwrap())
            .collect();
        let pairs = (rows.len() - 1) as f64;
        let o_cons = rows
            .windows(2)
            .filter(|w| top1(&w[0]).0 == top1(&w[1]).0)
            .count() as f64
            / pairs;
        let o_cec = -rows
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(a, b)| a * b.max(1e-12).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / pairs;
        for (name, got, want) in [
            ("nll", nll(&p, &labels).unwrap(), o_nll),
            ("ece", ece(&p, &labels, ECE_BINS).unwrap(), o_ece),
            (
                "relative confidence",
                relative_confidence(&p, &labels).unwrap(),
                o_rel,
            ),
            ("accuracy", accuracy(&p, &labels).unwrap(), o_acc),
            ("consistency", consistency(&frames).unwrap(), o_cons),
            ("cec", cec(&frames).unwrap(), o_cec),
        ] {
            let err = (got - want).abs();
            ensure!(err <= tol, "{name} seed {seed}: {got} vs {want}");
            worst = worst.max(err);
        }
    }

    let types = ["a", "b", "c", "d"];
    let grid = |seed: u64| {
        let mut rng = rng_from(seed, &[3001]);
        let mut r = MetricsReport::default();
        for t in types {
            for s in 1..=5u8 {
                r.corruption.push(CorruptionCell {
                    corruption: t.into(),
                    severity: s,
                    nll: rng.gen_range(0.1..2.0),
                    error: rng.gen_range(0.05..0.9),
                    ece: rng.gen_range(0.01..0.4),
                });
            }
        }
        r
    };
    let (model, base) = (grid(1), grid(2));
    let agg = corruption_aggregates(&model, &base).unwrap();
    let sum = |r: &MetricsReport, t: &str, f: fn(&CorruptionCell) -> f64| -> f64 {
        r.corruption
            .iter()
            .filter(|c| c.corruption == t)
            .map(f)
            .sum()
    };
    let mut means = [0.0; 3];
    for (i, t) in types.iter().enumerate() {
        let want = [
            sum(&model, t, |c| c.error) / sum(&base, t, |c| c.error),
            sum(&model, t, |c| c.nll) / sum(&base, t, |c| c.nll),
            sum(&model, t, |c| c.ece) / sum(&base, t, |c| c.ece),
        ];
        let got = [
            agg.per_type[i].ce,
            agg.per_type[i].cnll,
            agg.per_type[i].cece,
        ];
        for j in 0..3 {
            ensure!(
                (got[j] - want[j]).abs() <= tol,
                "aggregate {t}: {got:?} vs {want:?}"
            );
            means[j] += want[j] / types.len() as f64;
        }
    }
    let got = [agg.mce, agg.mcnll, agg.mcece];
    for j in 0..3 {
        ensure!(
            (got[j] - means[j]).abs() <= tol,
            "means {got:?} vs {means:?}"
        );
    }
    let same = corruption_aggregates(&model, &model).unwrap();
    ensure!(
        [same.mce, same.mcnll, same.mcece] == [1.0; 3]
            && same
                .per_type
                .iter()
                .all(|t| [t.ce, t.cnll, t.cece] == [1.0; 3]),
        "self-baseline ratios are not exactly 1"
    );
    Ok(format!(
        "6 metrics on 5 fixtures and CE aggregates within {worst:.1e}; self ratios exactly 1"
    ))
}
