use criterion::{black_box, criterion_group, criterion_main, Criterion};
use probsmooth::analysis::fft2;
use probsmooth::autograd::{PadMode, Tape};
use probsmooth::data::synth_shapes;
use probsmooth::ensembling::mc_predict;
use probsmooth::smoothing::{smooth, BlurKernel, ProbConfig};
use probsmooth::{Model, ModelSpec, Tensor};

fn feature(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618).sin())
}

fn conv(c: &mut Criterion) {
    let x = feature(&[32, 16, 16, 16]);
    let w = feature(&[32, 16, 3, 3]);
    c.bench_function("conv2d 32x16x16x16 -> 32ch", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            black_box(tape.value(y).numel())
        })
    });
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wv).map(|g| g.len()))
        })
    });
}

fn smoothing(c: &mut Criterion) {
    let x = feature(&[32, 32, 8, 8]);
    let cfg = ProbConfig::default();
    for k in [&[1.0, 1.0][..], &[1.0, 4.0, 6.0, 4.0, 1.0]] {
        let kernel = BlurKernel::new(k).unwrap();
        c.bench_function(&format!("smooth k={}", k.len()), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let v = tape.constant(x.clone());
                let y = smooth(&mut tape, v, &cfg, &kernel, PadMode::Replicate).unwrap();
                black_box(tape.value(y).numel())
            })
        });
    }
}

fn spectra(c: &mut Criterion) {
    let x = feature(&[16, 32, 16, 16]);
    c.bench_function("fft2 16x32 planes of 16x16", |b| {
        b.iter(|| black_box(fft2(&x).unwrap().data.len()))
    });
}

fn prediction(c: &mut Criterion) {
    let model = Model::build(&ModelSpec::reference(8)).unwrap();
    let ds = synth_shapes(64, 8, 16, 0).unwrap();
    let mut g = c.benchmark_group("mc_predict");
    g.sample_size(10);
    for n in [1, 10] {
        g.bench_function(format!("reference model, 64 images, N={n}"), |b| {
            b.iter(|| black_box(mc_predict(&model, ds.images(), n, 0).unwrap().mean().len()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, smoothing, spectra, prediction);
criterion_main!(benches);
