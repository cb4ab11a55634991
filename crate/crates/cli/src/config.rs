//! Run configuration: one TOML file per experiment.

use std::path::{Path, PathBuf};

use probsmooth::analysis::{HessianConfig, PowerIterConfig};
use probsmooth::data::{
    load_cifar_binary, load_idx, synth_shapes_with, CifarLayout, Corruption, Dataset, SynthParams,
};
use probsmooth::rng::{derive_seed, stream};
use probsmooth::train::TrainConfig;
use probsmooth::{Error, ModelSpec, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub consistency: ConsistencyConfig,
    #[serde(default)]
    pub fft: FftConfig,
    #[serde(default)]
    pub variance: VarianceConfig,
    #[serde(default = "default_hessian")]
    pub hessian: HessianConfig,
    #[serde(default)]
    pub loss_variance: LossVarianceConfig,
}

fn default_hessian() -> HessianConfig {
    HessianConfig {
        batch_size: 32,
        minibatches: 10,
        power: PowerIterConfig::default(),
        augment: true,
        pad: 2,
        l2_coeff: 5e-4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        train: usize,
        test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_contrast")]
        contrast: (f64, f64),
        /// Fixed generator seed; derived from the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
    Cifar100 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

fn default_noise() -> f64 {
    0.05
}

fn default_contrast() -> (f64, f64) {
    (0.3, 0.6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Training examples held out for per-epoch validation; the test split
    /// is used when zero.
    #[serde(default)]
    pub val_size: usize,
    /// Evaluate on the first `test_limit` test examples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// MC-dropout ensemble size N.
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    /// Keep dropout active at test time.
    #[serde(default = "default_true")]
    pub mc: bool,
    #[serde(default)]
    pub write_predictions: bool,
}

fn default_ensemble() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble_size: default_ensemble(),
            mc: true,
            write_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    #[serde(default = "all_corruptions")]
    pub types: Vec<Corruption>,
    #[serde(default = "all_severities")]
    pub severities: Vec<u8>,
    /// Reference report (TOML) or checkpoint for CE/CNLL/CECE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
}

fn all_corruptions() -> Vec<Corruption> {
    Corruption::ALL.to_vec()
}

fn all_severities() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            types: all_corruptions(),
            severities: all_severities(),
            baseline: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyConfig {
    /// Shift steps per sequence; a sequence has `steps + 1` frames.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Number of test images turned into sequences.
    #[serde(default = "default_sequences")]
    pub sequences: usize,
    /// Also report the temporally smoothed stream.
    #[serde(default)]
    pub temporal: bool,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_steps() -> usize {
    15
}

fn default_stride() -> usize {
    1
}

fn default_sequences() -> usize {
    100
}

fn default_window() -> usize {
    probsmooth::ensembling::TEMPORAL_WINDOW
}

fn default_decay() -> f64 {
    probsmooth::ensembling::default_temporal_decay()
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            stride: default_stride(),
            sequences: default_sequences(),
            temporal: false,
            window: default_window(),
            decay: default_decay(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FftConfig {
    /// Band centres in radians per pixel.
    #[serde(default = "default_frequencies")]
    pub frequencies: Vec<f64>,
    #[serde(default = "default_band")]
    pub width: f64,
    /// L2 norm of the added noise per image.
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    #[serde(default = "default_fft_images")]
    pub images: usize,
    /// Ensemble size for the perturbed predictions.
    #[serde(default = "default_fft_ensemble")]
    pub ensemble_size: usize,
}

fn default_frequencies() -> Vec<f64> {
    (0..=8)
        .map(|i| i as f64 * std::f64::consts::PI / 8.0)
        .collect()
}

fn default_band() -> f64 {
    std::f64::consts::PI / 8.0
}

fn default_magnitude() -> f64 {
    4.0
}

fn default_fft_images() -> usize {
    200
}

fn default_fft_ensemble() -> usize {
    10
}

impl Default for FftConfig {
    fn default() -> Self {
        Self {
            frequencies: default_frequencies(),
            width: default_band(),
            magnitude: default_magnitude(),
            images: default_fft_images(),
            ensemble_size: default_fft_ensemble(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_variance_images")]
    pub images: usize,
}

fn default_runs() -> usize {
    20
}

fn default_variance_images() -> usize {
    32
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            runs: default_runs(),
            images: default_variance_images(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossVarianceConfig {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_lv_images")]
    pub images: usize,
}

fn default_sizes() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}

fn default_trials() -> usize {
    200
}

fn default_lv_images() -> usize {
    32
}

impl Default for LossVarianceConfig {
    fn default() -> Self {
        Self {
            sizes: default_sizes(),
            trials: default_trials(),
            images: default_lv_images(),
        }
    }
}

/// Train and test splits after loading.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates `path`; relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data.source {
            DataSource::Synth { .. } => {}
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataSource::Cifar10 { train, test } | DataSource::Cifar100 { train, test } => {
                train.iter_mut().for_each(fix);
                fix(test);
            }
        }
        if let Some(b) = &mut self.corruption.baseline {
            fix(b);
        }
    }

    /// Checks every section and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        self.train.validate()?;
        let (c, side) = (self.model.input_channels, self.model.input_size);
        match &self.data.source {
            DataSource::Synth {
                train,
                test,
                noise,
                contrast,
                ..
            } => {
                if *train == 0 || *test == 0 {
                    return bad("synth data needs positive train and test sizes".into());
                }
                if c != 3 || side < 16 {
                    return bad(format!("synth images are 3x{side}x{side} with side >= 16; model expects {c} channels"));
                }
                if self.model.classes > probsmooth::data::MAX_SHAPE_CLASSES {
                    return bad(format!(
                        "synth data has at most {} classes",
                        probsmooth::data::MAX_SHAPE_CLASSES
                    ));
                }
                if !(*noise >= 0.0) || !(contrast.0 <= contrast.1) {
                    return bad("synth noise must be >= 0 and contrast an increasing pair".into());
                }
                if self.data.val_size >= *train {
                    return bad("val_size must leave training examples".into());
                }
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    must_exist(p)?;
                }
            }
            DataSource::Cifar10 { train, test } | DataSource::Cifar100 { train, test } => {
                if train.is_empty() {
                    return bad("cifar data needs at least one training file".into());
                }
                for p in train.iter().chain(std::iter::once(test)) {
                    must_exist(p)?;
                }
                if c != 3 || side != probsmooth::data::CIFAR_SIDE {
                    return bad(format!(
                        "cifar images are 3x32x32; model expects {c}x{side}x{side}"
                    ));
                }
            }
        }
        if self.data.test_limit == Some(0) {
            return bad("test_limit must be positive".into());
        }
        if self.eval.ensemble_size == 0 {
            return bad("eval.ensemble_size must be positive".into());
        }
        if self.corruption.types.is_empty() || self.corruption.severities.is_empty() {
            return bad("corruption grid needs at least one type and severity".into());
        }
        if let Some(s) = self
            .corruption
            .severities
            .iter()
            .find(|s| !(1..=5).contains(*s))
        {
            return bad(format!("corruption severity {s} outside 1..=5"));
        }
        if let Some(b) = &self.corruption.baseline {
            must_exist(b)?;
        }
        let cs = &self.consistency;
        if cs.steps == 0 || cs.stride == 0 || cs.sequences == 0 || cs.steps * cs.stride >= side {
            return bad(format!(
                "consistency needs positive steps/stride/sequences and steps*stride below the image width {side}"
            ));
        }
        if cs.temporal && (cs.window == 0 || !(cs.decay > 0.0 && cs.decay <= 1.0)) {
            return bad("temporal smoothing needs window >= 1 and decay in (0, 1]".into());
        }
        let f = &self.fft;
        if f.frequencies
            .iter()
            .any(|w| !(0.0..=std::f64::consts::PI).contains(w))
            || !(f.width > 0.0)
            || !(f.magnitude >= 0.0)
            || f.images == 0
            || f.ensemble_size == 0
        {
            return bad(
                "fft frequencies must lie in [0, pi] with positive width, images and ensemble size"
                    .into(),
            );
        }
        if self.variance.runs == 0 || self.variance.images == 0 {
            return bad("variance runs and images must be positive".into());
        }
        let h = &self.hessian;
        if h.batch_size == 0
            || h.minibatches == 0
            || h.power.k == 0
            || h.power.max_iter == 0
            || !(h.power.tol > 0.0)
        {
            return bad(
                "hessian batch size, minibatches, k, max_iter and tol must be positive".into(),
            );
        }
        let lv = &self.loss_variance;
        if lv.sizes.is_empty() || lv.sizes.contains(&0) || lv.trials < 2 || lv.images == 0 {
            return bad("loss_variance needs positive sizes, >= 2 trials and images".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical config with the output directory
    /// removed.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    /// Hash of everything that determines the corruption grid.
    pub fn grid_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Grid<'a> {
            seed: u64,
            data: &'a DataConfig,
            types: &'a [Corruption],
            severities: &'a [u8],
        }
        let g = Grid {
            seed: self.seed,
            data: &self.data,
            types: &self.corruption.types,
            severities: &self.corruption.severities,
        };
        let text = toml::to_string(&g).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn load_data(&self) -> Result<Splits> {
        let classes = self.model.classes;
        let (train, test) = match &self.data.source {
            DataSource::Synth {
                train,
                test,
                noise,
                contrast,
                seed,
            } => {
                let base = seed.unwrap_or_else(|| derive_seed(self.seed, &[stream::DATA]));
                let make = |n, split: u64| {
                    synth_shapes_with(&SynthParams {
                        n,
                        classes,
                        size: self.model.input_size,
                        seed: derive_seed(base, &[split]),
                        noise: *noise,
                        contrast: *contrast,
                    })
                };
                (make(*train, 0)?, make(*test, 1)?)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                load_idx(train_images, train_labels, Some(classes))?,
                load_idx(test_images, test_labels, Some(classes))?,
            ),
            DataSource::Cifar10 { train, test } => load_cifar(train, test, CifarLayout::Cifar10)?,
            DataSource::Cifar100 { train, test } => load_cifar(train, test, CifarLayout::Cifar100)?,
        };
        let (c, h, w) = test.image_shape();
        if (c, h, w)
            != (
                self.model.input_channels,
                self.model.input_size,
                self.model.input_size,
            )
        {
            return Err(Error::Config(format!(
                "data images are {c}x{h}x{w}, model expects {}x{s}x{s}",
                self.model.input_channels,
                s = self.model.input_size
            )));
        }
        if train.classes() > classes || test.classes() > classes {
            return Err(Error::Config(format!(
                "data has more than the model's {classes} classes"
            )));
        }
        let (train, val) = if self.data.val_size > 0 {
            if self.data.val_size >= train.len() {
                return Err(Error::Config(
                    "val_size must leave training examples".into(),
                ));
            }
            let (a, b) = train.split_at(train.len() - self.data.val_size)?;
            (a, Some(b))
        } else {
            (train, None)
        };
        let test = match self.data.test_limit {
            Some(n) if n < test.len() => test.head(n)?,
            _ => test,
        };
        Ok(Splits { train, val, test })
    }
}

fn load_cifar(train: &[PathBuf], test: &Path, layout: CifarLayout) -> Result<(Dataset, Dataset)> {
    let mut parts = train
        .iter()
        .map(|p| load_cifar_binary(p, layout))
        .collect::<Result<Vec<_>>>()?;
    let first = parts.remove(0);
    let train = parts.iter().try_fold(first, |acc, d| concat(&acc, d))?;
    Ok((train, load_cifar_binary(test, layout)?))
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut data = a.images().data().to_vec();
    data.extend_from_slice(b.images().data());
    let mut shape = a.images().shape().to_vec();
    shape[0] += b.len();
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    Dataset::new(
        probsmooth::Tensor::new(shape, data)?,
        labels,
        a.classes().max(b.classes()),
        a.split.clone(),
    )
}

fn must_exist(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "referenced file {} does not exist",
            p.display()
        )))
    }
}
