use probsmooth::ensembling::Probs;
use probsmooth::metrics::{
    accuracy, cec, consistency, corruption_aggregates, ece, nll, relative_confidence,
    CorruptionCell, MetricsReport, ECE_BINS,
};
use probsmooth::rng::rng_from;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-12;

fn fixture(n: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng_from(seed, &[42]);
    let rows = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (rows, labels)
}

fn top(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn oracle_nll(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (r, &y) in rows.iter().zip(labels) {
        s += -(if r[y] < 1e-12 { 1e-12 } else { r[y] }).ln();
    }
    s / rows.len() as f64
}

fn oracle_ece(rows: &[Vec<f64>], labels: &[usize], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let (mut n, mut hits, mut conf) = (0.0, 0.0, 0.0);
        for (r, &y) in rows.iter().zip(labels) {
            let (pred, c) = top(r);
            let member = (c > lo && c <= hi) || (b == 0 && c == 0.0);
            if member {
                n += 1.0;
                conf += c;
                hits += if pred == y { 1.0 } else { 0.0 };
            }
        }
        if n > 0.0 {
            total += n / rows.len() as f64 * (hits / n - conf / n).abs();
        }
    }
    total
}

fn oracle_rel_conf(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(r, &y)| r[y] / top(r).1)
        .sum::<f64>()
        / rows.len() as f64
}

fn oracle_consistency(frames: &[Vec<f64>]) -> f64 {
    let m = frames.len() - 1;
    (0..m)
        .filter(|&i| top(&frames[i]).0 == top(&frames[i + 1]).0)
        .count() as f64
        / m as f64
}

fn oracle_cec(frames: &[Vec<f64>]) -> f64 {
    let m = frames.len() - 1;
    let mut s = 0.0;
    for i in 0..m {
        for c in 0..frames[i].len() {
            s += frames[i][c] * frames[i + 1][c].max(1e-12).ln();
        }
    }
    -s / m as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

#[test]
fn metrics_match_brute_force_on_random_fixtures() {
    for seed in 0..10 {
        let (rows, labels) = fixture(100, 5, seed);
        let p = Probs::from_rows(&rows).unwrap();
        assert!(close(nll(&p, &labels).unwrap(), oracle_nll(&rows, &labels)));
        assert!(close(
            ece(&p, &labels, ECE_BINS).unwrap(),
            oracle_ece(&rows, &labels, ECE_BINS)
        ));
        assert!(close(
            ece(&p, &labels, 1).unwrap(),
            oracle_ece(&rows, &labels, 1)
        ));
        assert!(close(
            relative_confidence(&p, &labels).unwrap(),
            oracle_rel_conf(&rows, &labels)
        ));
        let acc = labels
            .iter()
            .zip(&rows)
            .filter(|(y, r)| top(r).0 == **y)
            .count() as f64
            / 100.0;
        assert!(close(accuracy(&p, &labels).unwrap(), acc));

        let frames: Vec<Probs> = rows
            .iter()
            .map(|r| Probs::from_rows(&[r.clone()]).unwrap())
            .collect();
        assert!(close(
            consistency(&frames).unwrap(),
            oracle_consistency(&rows)
        ));
        assert!(close(cec(&frames).unwrap(), oracle_cec(&rows)));
    }
}

#[test]
fn single_bin_ece_is_exactly_the_accuracy_gap() {
    let (rows, labels) = fixture(100, 4, 99);
    let p = Probs::from_rows(&rows).unwrap();
    let conf = rows.iter().map(|r| top(r).1).sum::<f64>() / 100.0;
    let gap = (accuracy(&p, &labels).unwrap() - conf).abs();
    assert!((ece(&p, &labels, 1).unwrap() - gap).abs() <= TOL);
    let e = ece(&p, &labels, ECE_BINS).unwrap();
    assert!((0.0..=1.0).contains(&e));
}

fn grid(seed: u64, types: &[&str]) -> MetricsReport {
    let mut rng = rng_from(seed, &[7]);
    let mut r = MetricsReport::default();
    for ty in types {
        for s in 1..=5 {
            r.corruption.push(CorruptionCell {
                corruption: ty.to_string(),
                severity: s,
                nll: rng.gen_range(0.1..3.0),
                error: rng.gen_range(0.05..0.9),
                ece: rng.gen_range(0.01..0.3),
            });
        }
    }
    r
}

#[test]
fn corruption_aggregates_match_brute_force() {
    let types = [
        "gaussian_noise",
        "impulse_noise",
        "gaussian_blur",
        "brightness",
        "contrast",
    ];
    let model = grid(1, &types);
    let base = grid(2, &types);
    let agg = corruption_aggregates(&model, &base).unwrap();
    let mut means = [0.0; 3];
    for (t, ty) in types.iter().enumerate() {
        let pick = |r: &MetricsReport, f: fn(&CorruptionCell) -> f64| -> f64 {
            r.corruption
                .iter()
                .filter(|c| c.corruption == *ty)
                .map(f)
                .sum()
        };
        let ce = pick(&model, |c| c.error) / pick(&base, |c| c.error);
        let cnll = pick(&model, |c| c.nll) / pick(&base, |c| c.nll);
        let cece = pick(&model, |c| c.ece) / pick(&base, |c| c.ece);
        assert!(close(agg.per_type[t].ce, ce));
        assert!(close(agg.per_type[t].cnll, cnll));
        assert!(close(agg.per_type[t].cece, cece));
        means[0] += ce / 5.0;
        means[1] += cnll / 5.0;
        means[2] += cece / 5.0;
    }
    assert!(close(agg.mce, means[0]) && close(agg.mcnll, means[1]) && close(agg.mcece, means[2]));

    let same = corruption_aggregates(&model, &model).unwrap();
    for t in &same.per_type {
        assert_eq!((t.ce, t.cnll, t.cece), (1.0, 1.0, 1.0));
    }
    assert_eq!((same.mce, same.mcnll, same.mcece), (1.0, 1.0, 1.0));
}

#[test]
fn mean_of_listed_ratios() {
    // three types whose ratios are 0.5, 1.0 and 1.5
    let mut base = MetricsReport::default();
    let mut model = MetricsReport::default();
    for (ty, ratio) in [("a", 0.5), ("b", 1.0), ("c", 1.5)] {
        for s in 1..=5 {
            let cell = |scale: f64| CorruptionCell {
                corruption: ty.into(),
                severity: s,
                nll: scale,
                error: 0.2 * scale,
                ece: 0.1 * scale,
            };
            base.corruption.push(cell(1.0));
            model.corruption.push(cell(ratio));
        }
    }
    let agg = corruption_aggregates(&model, &base).unwrap();
    assert!((agg.mce - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn consistency_ignores_monotone_rescaling(seed in any::<u64>(), len in 2usize..12, power in 0.2f64..5.0) {
        let (rows, _) = fixture(len, 4, seed);
        let frames: Vec<Probs> = rows.iter().map(|r| Probs::from_rows(&[r.clone()]).unwrap()).collect();
        let rescaled: Vec<Probs> = rows
            .iter()
            .map(|r| {
                let t: Vec<f64> = r.iter().map(|v| v.powf(power)).collect();
                let s: f64 = t.iter().sum();
                Probs::from_rows(&[t.iter().map(|v| v / s).collect()]).unwrap()
            })
            .collect();
        prop_assert_eq!(consistency(&frames).unwrap(), consistency(&rescaled).unwrap());
    }

    #[test]
    fn metric_ranges(seed in any::<u64>()) {
        let (rows, labels) = fixture(30, 3, seed);
        let p = Probs::from_rows(&rows).unwrap();
        let a = accuracy(&p, &labels).unwrap();
        let e = ece(&p, &labels, ECE_BINS).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(nll(&p, &labels).unwrap() >= 0.0);
    }
}
