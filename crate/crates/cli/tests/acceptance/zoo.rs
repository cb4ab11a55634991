//! Trained reference models, cached on disk by run-config hash, and their
//! MC-dropout predictions, cached for the duration of the run.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use probsmooth::ensembling::{mc_predict, PredictiveDistribution};
use probsmooth::Model;
use probsmooth_cli::commands::{load_checkpoint, train};
use probsmooth_cli::config::Splits;
use probsmooth_cli::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Smooth,
    Plain,
}

/// Dropout rate in thousandths, so it can key a map.
pub type Permille = u32;

pub const MC_MEMBERS: usize = 50;

pub struct Zoo {
    root: PathBuf,
    base: RunConfig,
    models: RefCell<HashMap<(Variant, Permille, u64), (Model, Splits)>>,
    predictions: RefCell<HashMap<(Variant, u64), PredictiveDistribution>>,
}

pub fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

impl Zoo {
    pub fn new() -> Self {
        Self {
            root: Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-models"),
            base: RunConfig::load(&reference_config()).expect("reference config"),
            models: RefCell::default(),
            predictions: RefCell::default(),
        }
    }

    pub fn config(&self, variant: Variant, dropout: Permille, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.out_dir = None;
        cfg.model.init_seed = seed;
        cfg.model.dropout_rate = dropout as f64 / 1000.0;
        if variant == Variant::Plain {
            cfg.model.smoothing = None;
        }
        cfg
    }

    /// Trained model and its data splits; trains on first use.
    pub fn model(&self, variant: Variant, dropout: Permille, seed: u64) -> (Model, Splits) {
        let key = (variant, dropout, seed);
        if let Some(hit) = self.models.borrow().get(&key) {
            return hit.clone();
        }
        let cfg = self.config(variant, dropout, seed);
        cfg.validate().expect("valid config");
        let splits = cfg.load_data().expect("data");
        let dir = self.root.join(cfg.config_hash().unwrap());
        let ckpt = dir.join("train/model.ckpt");
        let model = match load_checkpoint(&cfg, &ckpt) {
            Ok(m) => m,
            Err(_) => {
                eprintln!("  training {variant:?} dropout {dropout}/1000 seed {seed}");
                let (m, summary) = train(&cfg, &splits, &dir).expect("training");
                let last = summary.epochs.last().unwrap();
                eprintln!(
                    "  val nll {:.4} acc {:.3}",
                    last.val_nll.unwrap_or(f64::NAN),
                    last.val_accuracy.unwrap_or(f64::NAN)
                );
                m
            }
        };
        self.models
            .borrow_mut()
            .insert(key, (model.clone(), splits.clone()));
        (model, splits)
    }

    /// `MC_MEMBERS`-member MC-dropout prediction on the full test split at
    /// dropout 0.3.
    pub fn mc_test(&self, variant: Variant, seed: u64) -> (PredictiveDistribution, Vec<usize>) {
        let (model, splits) = self.model(variant, 300, seed);
        let labels = splits.test.labels().to_vec();
        if let Some(hit) = self.predictions.borrow().get(&(variant, seed)) {
            return (hit.clone(), labels);
        }
        let dist = mc_predict(&model, splits.test.images(), MC_MEMBERS, seed).expect("mc predict");
        self.predictions
            .borrow_mut()
            .insert((variant, seed), dist.clone());
        (dist, labels)
    }
}
