//! Acceptance run: every criterion at its stated tolerance, one
//! PASS/FAIL line each. `ACCEPTANCE_ONLY=4,9` restricts the run.

mod experiments;
mod oracles;
mod zoo;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use zoo::Zoo;

pub type Outcome = Result<String, String>;

/// Fails the enclosing criterion with a formatted message.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn(&Zoo) -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    vec![
        Criterion {
            id: 1,
            name: "gradient suite",
            limit: mins(1),
            run: oracles::gradient_suite,
        },
        Criterion {
            id: 2,
            name: "blur kernel and frequency response",
            limit: None,
            run: oracles::kernel_exactness,
        },
        Criterion {
            id: 3,
            name: "hessian oracle",
            limit: mins(2),
            run: oracles::hessian_oracle,
        },
        Criterion {
            id: 4,
            name: "loss variance scaling",
            limit: mins(10),
            run: experiments::loss_variance_scaling,
        },
        Criterion {
            id: 5,
            name: "neighbour covariance",
            limit: None,
            run: oracles::covariance_formula,
        },
        Criterion {
            id: 6,
            name: "feature variance direction",
            limit: None,
            run: experiments::feature_variance,
        },
        Criterion {
            id: 7,
            name: "ensemble monotonicity",
            limit: None,
            run: experiments::ensemble_monotonicity,
        },
        Criterion {
            id: 8,
            name: "smoothing benefit",
            limit: mins(60),
            run: experiments::smoothing_benefit,
        },
        Criterion {
            id: 9,
            name: "frequency robustness",
            limit: None,
            run: experiments::frequency_robustness,
        },
        Criterion {
            id: 10,
            name: "metric oracles",
            limit: None,
            run: oracles::metric_oracles,
        },
        Criterion {
            id: 11,
            name: "dropout sharpness",
            limit: None,
            run: experiments::dropout_sharpness,
        },
        Criterion {
            id: 12,
            name: "subcommand determinism",
            limit: None,
            run: experiments::determinism,
        },
    ]
}

fn selected() -> Option<Vec<usize>> {
    let raw = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(
        raw.split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
    )
}

fn main() -> ExitCode {
    let only = selected();
    let zoo = Zoo::new();
    panic::set_hook(Box::new(|_| {}));
    let mut lines = Vec::new();
    let mut failed = 0;
    for c in criteria() {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        eprintln!("criterion {}: {} ...", c.id, c.name);
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| (c.run)(&zoo)))
            .unwrap_or_else(|p| Err(panic_message(p)));
        let took = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if took > limit => {
                Err(format!("took {took:.1?}, limit {limit:?}"))
            }
            (o, _) => o,
        };
        let line = match &outcome {
            Ok(detail) => format!(
                "PASS criterion {:>2} {}: {detail} [{took:.1?}]",
                c.id, c.name
            ),
            Err(why) => {
                failed += 1;
                format!("FAIL criterion {:>2} {}: {why} [{took:.1?}]", c.id, c.name)
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}
