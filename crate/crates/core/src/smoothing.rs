//! Probabilistic spatial smoothing: `Smooth = Blur ∘ Prob`.
//!
//! `Prob` maps real-valued feature maps to bounded, non-negative
//! (unnormalized) probabilities; `Blur` averages neighbouring probabilities
//! with a fixed, normalized depth-wise kernel.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{PadMode, Tape, Var};
use crate::error::{Error, Result};

/// Upper-bounded map used inside `Prob`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbVariant {
    /// `ReLU(tau * tanh(z / tau))`
    #[default]
    TanhTau,
    /// `max(min(z, 6), 0)`; `tau` is ignored.
    Relu6,
    /// `ReLU(z / tau)`
    ConstantScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbConfig {
    #[serde(default)]
    pub variant: ProbVariant,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    10.0
}

impl Default for ProbConfig {
    fn default() -> Self {
        Self {
            variant: ProbVariant::TanhTau,
            tau: default_tau(),
        }
    }
}

impl ProbConfig {
    pub fn new(variant: ProbVariant, tau: f64) -> Result<Self> {
        let cfg = Self { variant, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant != ProbVariant::Relu6 && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "prob temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Largest value `prob` can produce, if bounded.
    pub fn upper_bound(&self) -> Option<f64> {
        match self.variant {
            ProbVariant::TanhTau => Some(self.tau),
            ProbVariant::Relu6 => Some(6.0),
            ProbVariant::ConstantScale => None,
        }
    }
}

/// Normalized separable blur kernel `K = (k ⊗ k) / |k|_1^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    k: Vec<f64>,
    k2d: Rc<[f64]>,
}

impl BlurKernel {
    pub fn new(k: &[f64]) -> Result<Self> {
        if k.is_empty() || k.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "blur coefficients must be a non-empty list of positive values, got {k:?}"
            )));
        }
        let l1: f64 = k.iter().sum();
        let norm = l1 * l1;
        let k2d: Vec<f64> = k
            .iter()
            .flat_map(|a| k.iter().map(move |b| a * b / norm))
            .collect();
        Ok(Self {
            k: k.to_vec(),
            k2d: k2d.into(),
        })
    }

    /// The default 2x2 box blur, `k = (1, 1)`.
    pub fn box2() -> Self {
        Self::new(&[1.0, 1.0]).expect("valid kernel")
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.k
    }

    pub fn size(&self) -> usize {
        self.k.len()
    }

    /// Row-major `size x size` 2-D kernel.
    pub fn kernel_2d(&self) -> &[f64] {
        &self.k2d
    }

    /// Leading padding; the remainder goes after, so even sizes pad the
    /// right/bottom edge by one more.
    pub fn pad_before(&self) -> usize {
        (self.size() - 1) / 2
    }
}

/// `tau * tanh(z / tau)`.
pub fn tanh_tau(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "tanh temperature must be positive, got {tau}"
        )));
    }
    let scaled = tape.scale(z, 1.0 / tau);
    let t = tape.tanh(scaled);
    Ok(tape.scale(t, tau))
}

pub fn prob(tape: &mut Tape, z: Var, cfg: &ProbConfig) -> Result<Var> {
    cfg.validate()?;
    Ok(match cfg.variant {
        ProbVariant::TanhTau => {
            let t = tanh_tau(tape, z, cfg.tau)?;
            tape.relu(t)
        }
        ProbVariant::Relu6 => {
            let c = tape.clamp_max(z, 6.0);
            tape.relu(c)
        }
        ProbVariant::ConstantScale => {
            let s = tape.scale(z, 1.0 / cfg.tau);
            tape.relu(s)
        }
    })
}

/// Stride-1 depth-wise blur that preserves spatial size.
pub fn blur(tape: &mut Tape, p: Var, kernel: &BlurKernel, padding: PadMode) -> Result<Var> {
    if kernel.size() == 1 {
        // (k ⊗ k) / k^2 == 1 exactly.
        return Ok(p);
    }
    tape.depthwise_fixed(
        p,
        kernel.k2d.clone(),
        kernel.size(),
        kernel.pad_before(),
        padding,
    )
}

pub fn smooth(
    tape: &mut Tape,
    z: Var,
    cfg: &ProbConfig,
    kernel: &BlurKernel,
    padding: PadMode,
) -> Result<Var> {
    let p = prob(tape, z, cfg)?;
    blur(tape, p, kernel, padding)
}
