//! Stage-based CNN description and its parameterized form.
//!
//! A network is a stem, a list of stages of residual blocks, and a
//! classifier head. Each stage may end with a `Smooth` layer, which then
//! sits right before the next downsampling step (the strided first block of
//! the next stage, or the global pooling of the head).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchStats, PadMode, PoolKind, Tape, Var};
use crate::ensembling::{PredictiveDistribution, Probs};
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream, Rng};
use crate::smoothing::{self, BlurKernel, ProbConfig};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    #[default]
    Gap,
    Mlp,
    Gmaxp,
    Gmedp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// conv -> norm -> ReLU
    #[default]
    Post,
    /// norm -> ReLU -> conv
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics, stochastic dropout.
    #[default]
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, stochastic dropout.
    McEval,
}

impl Mode {
    fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McEval)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub downsample: bool,
    #[serde(default = "default_true")]
    pub residual: bool,
}

fn default_blocks() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    #[serde(default)]
    pub prob: ProbConfig,
    /// One-dimensional blur coefficients `k`.
    #[serde(default = "default_kernel")]
    pub kernel: Vec<f64>,
    /// Stage indices followed by a `Smooth` layer; every stage when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Vec<usize>>,
    #[serde(default)]
    pub padding: PadMode,
}

fn default_kernel() -> Vec<f64> {
    vec![1.0, 1.0]
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        Self {
            prob: ProbConfig::default(),
            kernel: default_kernel(),
            placement: None,
            padding: PadMode::Replicate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem_channels: Option<usize>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub classifier: Classifier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
    #[serde(default = "default_mlp_dropout")]
    pub mlp_dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<SmoothingSpec>,
}

fn default_mlp_dropout() -> f64 {
    0.5
}

impl ModelSpec {
    /// Desk-scale two-stage residual network with smoothing after both
    /// stages and MC dropout in every block.
    pub fn reference(classes: usize) -> Self {
        Self {
            input_channels: 3,
            input_size: 16,
            classes,
            stem_channels: Some(16),
            dropout_rate: 0.3,
            classifier: Classifier::Gap,
            mlp_hidden: None,
            mlp_dropout: default_mlp_dropout(),
            activation: Activation::Post,
            init_seed: 0,
            stages: vec![
                StageSpec {
                    channels: 16,
                    blocks: 1,
                    downsample: false,
                    residual: true,
                },
                StageSpec {
                    channels: 32,
                    blocks: 1,
                    downsample: true,
                    residual: true,
                },
            ],
            smoothing: Some(SmoothingSpec::default()),
        }
    }

    /// ResNet-18 layout for 32x32 inputs.
    pub fn resnet18(classes: usize) -> Self {
        let stage = |channels, downsample| StageSpec {
            channels,
            blocks: 2,
            downsample,
            residual: true,
        };
        Self {
            input_channels: 3,
            input_size: 32,
            classes,
            stem_channels: Some(64),
            stages: vec![
                stage(64, false),
                stage(128, true),
                stage(256, true),
                stage(512, true),
            ],
            ..Self::reference(classes)
        }
    }

    pub fn without_smoothing(mut self) -> Self {
        self.smoothing = None;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 || self.input_size == 0 || self.classes == 0 {
            return cfg("input channels, input size and class count must be positive".into());
        }
        for (name, rate) in [
            ("dropout_rate", self.dropout_rate),
            ("mlp_dropout", self.mlp_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return cfg(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        if self.stem_channels == Some(0) || self.mlp_hidden == Some(0) {
            return cfg("layer widths must be positive".into());
        }
        let mut channels = self.stem_channels.unwrap_or(self.input_channels);
        let mut size = self.input_size;
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 || st.blocks == 0 {
                return cfg(format!("stage {i} needs positive channels and blocks"));
            }
            if i > 0 && st.channels < channels {
                return cfg(format!(
                    "stage {i} narrows channels from {channels} to {}; widths must be non-decreasing",
                    st.channels
                ));
            }
            channels = st.channels;
            if st.downsample {
                if size < 2 {
                    return cfg(format!("stage {i} cannot downsample a {size}x{size} map"));
                }
                size = (size - 1) / 2 + 1;
            }
        }
        if let Some(sm) = &self.smoothing {
            sm.prob.validate()?;
            BlurKernel::new(&sm.kernel)?;
            if let Some(bad) = sm
                .placement
                .iter()
                .flatten()
                .find(|&&i| i >= self.stages.len())
            {
                return cfg(format!(
                    "smoothing placement {bad} is not a stage index (model has {} stages)",
                    self.stages.len()
                ));
            }
        }
        Ok(())
    }

    fn smooth_after(&self, stage: usize) -> bool {
        match &self.smoothing {
            None => false,
            Some(sm) => sm.placement.as_ref().map_or(true, |p| p.contains(&stage)),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialized spec.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    projection: Option<(Conv, Option<Norm>)>,
    residual: bool,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Block>,
    smooth: bool,
}

#[derive(Clone, Debug)]
enum Head {
    Pool { kind: PoolKind, fc: Linear },
    Mlp { hidden: Linear, out: Linear },
}

/// Running batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Feature maps captured during a forward pass, in execution order.
#[derive(Clone, Debug, Default)]
pub struct FeatureProbe {
    pub records: Vec<(String, Tensor)>,
}

impl FeatureProbe {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Batch statistics of each training-mode norm, keyed by state index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
    names: Vec<String>,
    norms: Vec<NormState>,
    stem: Option<(Conv, Option<Norm>)>,
    stages: Vec<Stage>,
    final_norm: Option<Norm>,
    head: Head,
    kernel: Option<BlurKernel>,
    mode: Mode,
}

struct Builder {
    params: Vec<Tensor>,
    names: Vec<String>,
    norms: Vec<NormState>,
    rng: Rng,
}

impl Builder {
    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.push(name, t)
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t.with_requires_grad(true));
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, stride: usize) -> Conv {
        Conv {
            weight: self.he_uniform(format!("{name}.weight"), &[out, inp, k, k], inp * k * k),
            stride,
            padding: k / 2,
        }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[ch], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[ch]));
        self.norms.push(NormState {
            mean: vec![0.0; ch],
            var: vec![1.0; ch],
        });
        Norm {
            gamma,
            beta,
            state: self.norms.len() - 1,
        }
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        Linear {
            weight: self.he_uniform(format!("{name}.weight"), &[inp, out], inp),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }
}

/// Everything threaded through one forward pass.
struct Pass<'a> {
    tape: &'a mut Tape,
    params: &'a [Var],
    mode: Mode,
    rng: &'a mut Rng,
    probe: Option<&'a mut FeatureProbe>,
    batch_stats: Vec<(usize, BatchStats)>,
}

impl Pass<'_> {
    fn record(&mut self, name: impl Into<String>, v: Var) {
        if let Some(p) = self.probe.as_deref_mut() {
            p.records.push((name.into(), self.tape.value(v).clone()));
        }
    }
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            norms: Vec::new(),
            rng: rng_from(spec.init_seed, &[stream::INIT]),
        };
        let pre = spec.activation == Activation::Pre;
        let mut ch = spec.input_channels;
        let stem = spec.stem_channels.map(|out| {
            let conv = b.conv("stem.conv", out, ch, 3, 1);
            let norm = (!pre).then(|| b.norm("stem.norm", out));
            ch = out;
            (conv, norm)
        });
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (si, st) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.blocks);
            for bi in 0..st.blocks {
                let name = format!("stage{si}.block{bi}");
                let stride = if bi == 0 && st.downsample { 2 } else { 1 };
                let conv1 = b.conv(&format!("{name}.conv1"), st.channels, ch, 3, stride);
                let norm1 = b.norm(&format!("{name}.norm1"), if pre { ch } else { st.channels });
                let conv2 = b.conv(&format!("{name}.conv2"), st.channels, st.channels, 3, 1);
                let norm2 = b.norm(&format!("{name}.norm2"), st.channels);
                let projection = (st.residual && (stride != 1 || ch != st.channels)).then(|| {
                    let conv = b.conv(&format!("{name}.shortcut"), st.channels, ch, 1, stride);
                    let norm =
                        (!pre).then(|| b.norm(&format!("{name}.shortcut_norm"), st.channels));
                    (conv, norm)
                });
                blocks.push(Block {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    projection,
                    residual: st.residual,
                });
                ch = st.channels;
            }
            stages.push(Stage {
                blocks,
                smooth: spec.smooth_after(si),
            });
        }
        let final_norm = (pre && !spec.stages.is_empty()).then(|| b.norm("final.norm", ch));
        let size = spec.stages.iter().fold(spec.input_size, |s, st| {
            if st.downsample {
                (s - 1) / 2 + 1
            } else {
                s
            }
        });
        let head = match spec.classifier {
            Classifier::Mlp => {
                let hidden = spec.mlp_hidden.unwrap_or(ch);
                Head::Mlp {
                    hidden: b.linear("head.hidden", ch * size * size, hidden),
                    out: b.linear("head.out", hidden, spec.classes),
                }
            }
            kind => Head::Pool {
                kind: match kind {
                    Classifier::Gap => PoolKind::Avg,
                    Classifier::Gmaxp => PoolKind::Max,
                    _ => PoolKind::Median,
                },
                fc: b.linear("head.fc", ch, spec.classes),
            },
        };
        let kernel = match &spec.smoothing {
            Some(sm) => Some(BlurKernel::new(&sm.kernel)?),
            None => None,
        };
        Ok(Self {
            spec: spec.clone(),
            params: b.params,
            names: b.names,
            norms: b.norms,
            stem,
            stages,
            final_norm,
            head,
            kernel,
            mode: Mode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn norm_states(&self) -> &[NormState] {
        &self.norms
    }

    /// Replaces all parameter values, keeping shapes.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "set_params",
                format!(
                    "expected {} tensors, got {}",
                    self.params.len(),
                    params.len()
                ),
            ));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::shape("set_params", old.shape(), new.shape()));
            }
        }
        self.params = params
            .into_iter()
            .map(|p| p.with_requires_grad(true))
            .collect();
        Ok(())
    }

    /// Number of `Smooth` layers in the network.
    pub fn smooth_count(&self) -> usize {
        self.stages.iter().filter(|s| s.smooth).count()
    }

    /// Layer sequence, e.g. `["stem", "stage0", "smooth0", "stage1", "head:gap"]`.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stem.is_some() {
            out.push("stem".to_string());
        }
        for (i, s) in self.stages.iter().enumerate() {
            out.push(format!("stage{i}"));
            if s.smooth {
                out.push(format!("smooth{i}"));
            }
        }
        if self.final_norm.is_some() {
            out.push("final_norm".to_string());
        }
        out.push(format!("head:{:?}", self.spec.classifier).to_lowercase());
        out
    }

    /// Output `(channels, height, width)` of every stage.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut size = self.spec.input_size;
        self.spec
            .stages
            .iter()
            .map(|st| {
                if st.downsample {
                    size = (size - 1) / 2 + 1;
                }
                (st.channels, size, size)
            })
            .collect()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn conv(&self, pass: &mut Pass, x: Var, c: Conv) -> Result<Var> {
        pass.tape
            .conv2d(x, pass.params[c.weight], c.stride, c.padding)
    }

    fn norm(&self, pass: &mut Pass, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (pass.params[n.gamma], pass.params[n.beta]);
        if pass.mode == Mode::Train {
            let (y, stats) = pass.tape.batch_norm(x, g, b, BN_EPS)?;
            pass.batch_stats.push((n.state, stats));
            Ok(y)
        } else {
            let st = &self.norms[n.state];
            pass.tape
                .batch_norm_eval(x, g, b, &st.mean, &st.var, BN_EPS)
        }
    }

    fn norm_relu(&self, pass: &mut Pass, x: Var, n: Norm) -> Result<Var> {
        let y = self.norm(pass, x, n)?;
        Ok(pass.tape.relu(y))
    }

    fn linear(&self, pass: &mut Pass, x: Var, l: Linear) -> Result<Var> {
        let y = pass.tape.matmul(x, pass.params[l.weight])?;
        pass.tape.add_bias(y, pass.params[l.bias])
    }

    fn block(&self, pass: &mut Pass, x: Var, blk: &Block) -> Result<Var> {
        let rate = self.spec.dropout_rate;
        let active = pass.mode.dropout_active();
        match self.spec.activation {
            Activation::Post => {
                let h = self.conv(pass, x, blk.conv1)?;
                let h = self.norm_relu(pass, h, blk.norm1)?;
                let h = pass.tape.dropout(h, rate, active, pass.rng)?;
                let h = self.conv(pass, h, blk.conv2)?;
                let mut h = self.norm(pass, h, blk.norm2)?;
                if blk.residual {
                    let sc = match blk.projection {
                        Some((c, n)) => {
                            let s = self.conv(pass, x, c)?;
                            match n {
                                Some(n) => self.norm(pass, s, n)?,
                                None => s,
                            }
                        }
                        None => x,
                    };
                    h = pass.tape.add(h, sc)?;
                }
                Ok(pass.tape.relu(h))
            }
            Activation::Pre => {
                let a = self.norm_relu(pass, x, blk.norm1)?;
                let h = self.conv(pass, a, blk.conv1)?;
                let h = self.norm_relu(pass, h, blk.norm2)?;
                let h = pass.tape.dropout(h, rate, active, pass.rng)?;
                let mut h = self.conv(pass, h, blk.conv2)?;
                if blk.residual {
                    let sc = match blk.projection {
                        Some((c, _)) => self.conv(pass, a, c)?,
                        None => x,
                    };
                    h = pass.tape.add(h, sc)?;
                }
                Ok(h)
            }
        }
    }

    fn smooth(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let sm = self
            .spec
            .smoothing
            .as_ref()
            .expect("smooth layers imply a smoothing spec");
        let kernel = self
            .kernel
            .as_ref()
            .expect("kernel built with smoothing spec");
        smoothing::smooth(pass.tape, x, &sm.prob, kernel, sm.padding)
    }

    /// Records the network on `tape` using the given parameter handles
    /// (from [`bind`](Self::bind) or any same-shaped substitutes).
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
        probe: Option<&mut FeatureProbe>,
    ) -> Result<ForwardOutput> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected {} parameter handles, got {}",
                    self.params.len(),
                    params.len()
                ),
            ));
        }
        let s = &self.spec;
        let expected = [s.input_channels, s.input_size, s.input_size];
        match tape.shape(x) {
            [_, rest @ ..] if rest == expected => {}
            other => {
                let mut want = vec![0];
                want.extend_from_slice(&expected);
                return Err(Error::shape("forward", other, &want));
            }
        }
        let mut pass = Pass {
            tape,
            params,
            mode,
            rng,
            probe,
            batch_stats: Vec::new(),
        };
        let mut h = x;
        if let Some((conv, norm)) = self.stem {
            h = self.conv(&mut pass, h, conv)?;
            if let Some(n) = norm {
                h = self.norm_relu(&mut pass, h, n)?;
            }
            pass.record("stem", h);
        }
        let last = self.stages.len().saturating_sub(1);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, blk) in stage.blocks.iter().enumerate() {
                h = self.block(&mut pass, h, blk)?;
                pass.record(format!("stage{si}.block{bi}"), h);
            }
            if si == last {
                if let Some(n) = self.final_norm {
                    h = self.norm_relu(&mut pass, h, n)?;
                }
            }
            pass.record(format!("stage{si}"), h);
            if stage.smooth {
                h = self.smooth(&mut pass, h)?;
                pass.record(format!("smooth{si}"), h);
            }
        }
        let logits = match &self.head {
            Head::Pool { kind, fc } => {
                let pooled = global_pool(pass.tape, h, *kind)?;
                self.linear(&mut pass, pooled, *fc)?
            }
            Head::Mlp { hidden, out } => {
                let shape = pass.tape.shape(h).to_vec();
                let flat = pass
                    .tape
                    .reshape(h, &[shape[0], shape[1..].iter().product()])?;
                let z = self.linear(&mut pass, flat, *hidden)?;
                let z = pass.tape.relu(z);
                let active = pass.mode.dropout_active();
                let z = pass.tape.dropout(z, s.mlp_dropout, active, pass.rng)?;
                self.linear(&mut pass, z, *out)?
            }
        };
        Ok(ForwardOutput {
            logits,
            batch_stats: pass.batch_stats,
        })
    }

    /// Class probabilities for `x`, one stochastic draw in the current mode.
    pub fn predict_probs(&self, x: &Tensor, rng: &mut Rng) -> Result<Probs> {
        self.predict_probs_probed(x, rng, None)
    }

    pub fn predict_in_mode(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Probs> {
        self.predict_chunked(x, mode, rng, None)
    }

    pub fn predict_probs_probed(
        &self,
        x: &Tensor,
        rng: &mut Rng,
        probe: Option<&mut FeatureProbe>,
    ) -> Result<Probs> {
        self.predict_chunked(x, self.mode, rng, probe)
    }

    /// Forward passes over chunks of at most `PREDICT_CHUNK` inputs. With a
    /// probe, the batch is processed whole so records cover every input.
    fn predict_chunked(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
        probe: Option<&mut FeatureProbe>,
    ) -> Result<Probs> {
        let n = x.shape().first().copied().unwrap_or(0);
        if probe.is_some() || n <= PREDICT_CHUNK {
            return self.predict_batch(x.clone(), mode, rng, probe);
        }
        let parts = (0..n)
            .step_by(PREDICT_CHUNK)
            .map(|s| {
                self.predict_batch(
                    x.slice_outer(s, (s + PREDICT_CHUNK).min(n))?,
                    mode,
                    rng,
                    None,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Probs::concat(&parts)
    }

    fn predict_batch(
        &self,
        x: Tensor,
        mode: Mode,
        rng: &mut Rng,
        probe: Option<&mut FeatureProbe>,
    ) -> Result<Probs> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let xv = tape.constant(x);
        let out = self.forward_graph(&mut tape, &params, xv, mode, rng, probe)?;
        let p = tape.softmax(out.logits)?;
        Probs::from_tensor(tape.value(p))
    }

    /// Single-member predictive distribution.
    pub fn forward(&self, x: &Tensor, rng: &mut Rng) -> Result<PredictiveDistribution> {
        PredictiveDistribution::single(self.predict_probs(x, rng)?)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_norm_states(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, st) in stats {
            let run = &mut self.norms[*idx];
            for (r, b) in run.mean.iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in run.var.iter_mut().zip(&st.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Global spatial pooling of `[n, c, h, w]` to `[n, c]`.
pub fn global_pool(tape: &mut Tape, x: Var, kind: PoolKind) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(
            "global_pool",
            format!("expected 4-D input, got {s:?}"),
        ));
    }
    let pooled = tape.pool2d(x, kind, (s[2], s[3]), 1, 0)?;
    tape.reshape(pooled, &s[..2])
}

pub fn gap(tape: &mut Tape, x: Var) -> Result<Var> {
    global_pool(tape, x, PoolKind::Avg)
}

pub fn gmaxp(tape: &mut Tape, x: Var) -> Result<Var> {
    global_pool(tape, x, PoolKind::Max)
}

pub fn gmedp(tape: &mut Tape, x: Var) -> Result<Var> {
    global_pool(tape, x, PoolKind::Median)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Returns true when `bytes` start like a checkpoint file.
pub fn is_checkpoint(bytes: &[u8]) -> bool {
    bytes.starts_with(CHECKPOINT_MAGIC)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > limit {
        return Err(Error::invalid(
            "checkpoint",
            format!("string of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::invalid("checkpoint", e.to_string()))
}

impl Model {
    /// Layout: magic `PSCK`, version byte, spec TOML (length-prefixed),
    /// spec hash (length-prefixed hex), then named parameter tensors and
    /// running norm statistics in the tensor wire format.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        let spec = self.spec.to_toml()?;
        write_u64(w, spec.len() as u64)?;
        w.write_all(spec.as_bytes())?;
        let hash = self.spec.config_hash()?;
        write_u64(w, hash.len() as u64)?;
        w.write_all(hash.as_bytes())?;
        write_u64(w, self.params.len() as u64)?;
        for (name, p) in self.names.iter().zip(&self.params) {
            write_u64(w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            p.write_to(w)?;
        }
        write_u64(w, self.norms.len() as u64)?;
        for st in &self.norms {
            Tensor::new(vec![st.mean.len()], st.mean.clone())?.write_to(w)?;
            Tensor::new(vec![st.var.len()], st.var.clone())?.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic[..4] != CHECKPOINT_MAGIC {
            return Err(Error::invalid("checkpoint", "missing checkpoint magic"));
        }
        if magic[4] != CHECKPOINT_VERSION {
            return Err(Error::invalid(
                "checkpoint",
                format!("unsupported format version {}", magic[4]),
            ));
        }
        let spec = ModelSpec::from_toml(&read_string(r, 1 << 20)?)?;
        let hash = read_string(r, 128)?;
        if hash != spec.config_hash()? {
            return Err(Error::invalid(
                "checkpoint",
                "stored hash does not match stored spec",
            ));
        }
        let mut model = Model::build(&spec)?;
        let count = read_u64(r)? as usize;
        if count != model.params.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "{count} parameters stored, spec needs {}",
                    model.params.len()
                ),
            ));
        }
        for i in 0..count {
            let name = read_string(r, 1024)?;
            if name != model.names[i] {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("parameter {i} is `{name}`, expected `{}`", model.names[i]),
                ));
            }
            let t = Tensor::read_from(r)?;
            if t.shape() != model.params[i].shape() {
                return Err(Error::shape(
                    "checkpoint",
                    model.params[i].shape(),
                    t.shape(),
                ));
            }
            model.params[i] = t.with_requires_grad(true);
        }
        let norms = read_u64(r)? as usize;
        if norms != model.norms.len() {
            return Err(Error::invalid("checkpoint", "norm state count mismatch"));
        }
        for st in &mut model.norms {
            let mean = Tensor::read_from(r)?.into_data();
            let var = Tensor::read_from(r)?.into_data();
            if mean.len() != st.mean.len() || var.len() != st.var.len() {
                return Err(Error::invalid("checkpoint", "norm state width mismatch"));
            }
            st.mean = mean;
            st.var = var;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}
