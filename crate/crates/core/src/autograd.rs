//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Nodes are only
//! appended, so the recording order is already a topological order and
//! [`Tape::backward`] simply walks it in reverse.

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Probability floor applied before every logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
    /// Lower median of each window: index `(n - 1) / 2` after sorting.
    Median,
}

/// Boundary handling for fixed depth-wise filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Replicate,
    Zero,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    DepthwiseFixed {
        input: Var,
        kernel: Rc<[f64]>,
        size: usize,
        pad_before: usize,
        mode: PadMode,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        window: (usize, usize),
        stride: usize,
        padding: usize,
        // Max/median: input flat index chosen for each output.
        routes: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    ClampMax(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    NllProbs(Var, Rc<[usize]>),
    NllLogProbs(Var, Rc<[usize]>),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MulConst(Var, Vec<f64>),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Layout of a 4-D `batch x channel x height x width` tensor.
#[derive(Clone, Copy, Debug)]
struct Nchw {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<Nchw> {
    match *shape {
        [n, c, h, w] => Ok(Nchw { n, c, h, w }),
        _ => Err(Error::invalid(
            op,
            format!("expected a batch x channel x height x width tensor, got {shape:?}"),
        )),
    }
}

/// `c = a * b + beta * c` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: operand lengths are asserted above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf, honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.min(c), Op::ClampMax(x, c))
    }

    /// Multiplies elementwise by a constant (non-differentiable) factor.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let value = self.value(x);
        if factor.len() != value.numel() {
            return Err(Error::shape("mul_const", value.shape(), &[factor.len()]));
        }
        let data = value
            .data()
            .iter()
            .zip(&factor)
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, factor), rg))
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`. Identity when inactive.
    pub fn dropout(&mut self, x: Var, rate: f64, active: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a per-channel bias along dimension 1.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
        let out = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// 2-D cross-correlation of `input [n, c, h, w]` with `kernel [o, c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let x = nchw("conv2d", self.shape(input))?;
        let (o, kh, kw) = match *self.shape(kernel) {
            [o, c, kh, kw] if c == x.c => (o, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    self.shape(input),
                    self.shape(kernel),
                ))
            }
        };
        if x.h + 2 * padding < kh || x.w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                self.shape(input),
                self.shape(kernel),
            ));
        }
        let oh = (x.h + 2 * padding - kh) / stride + 1;
        let ow = (x.w + 2 * padding - kw) / stride + 1;
        let ckk = x.c * kh * kw;
        let p = oh * ow;
        let xin = self.value(input).data();
        let wdat = self.value(kernel).data();
        let mut cols = vec![0.0; x.n * ckk * p];
        let mut out = vec![0.0; x.n * o * p];
        for b in 0..x.n {
            let col = &mut cols[b * ckk * p..(b + 1) * ckk * p];
            im2col(
                &xin[b * x.c * x.h * x.w..],
                x,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                col,
            );
            gemm(
                o,
                ckk,
                p,
                wdat,
                false,
                col,
                false,
                0.0,
                &mut out[b * o * p..(b + 1) * o * p],
            );
        }
        let rg = self.rg(input) || self.rg(kernel);
        let value = Tensor::new(vec![x.n, o, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                cols,
            },
            rg,
        ))
    }

    /// Stride-1 depth-wise filtering with a fixed `size x size` kernel shared
    /// by all channels. `pad_before + pad_after` must equal `size - 1`, so the
    /// spatial size is preserved.
    pub fn depthwise_fixed(
        &mut self,
        input: Var,
        kernel: Rc<[f64]>,
        size: usize,
        pad_before: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let x = nchw("depthwise", self.shape(input))?;
        if size == 0 || kernel.len() != size * size || pad_before >= size {
            return Err(Error::invalid(
                "depthwise",
                format!(
                    "kernel of {} values is not {size}x{size} with pad {pad_before}",
                    kernel.len()
                ),
            ));
        }
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        let plane = x.h * x.w;
        for (po, pi) in out.chunks_mut(plane).zip(src.chunks(plane)) {
            for i in 0..x.h {
                for j in 0..x.w {
                    let mut acc = 0.0;
                    for a in 0..size {
                        for b in 0..size {
                            if let Some(idx) = pad_index(i + a, j + b, pad_before, x, mode) {
                                acc += kernel[a * size + b] * pi[idx];
                            }
                        }
                    }
                    po[i * x.w + j] = acc;
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::DepthwiseFixed {
                input,
                kernel,
                size,
                pad_before,
                mode,
            },
            rg,
        ))
    }

    /// Sliding-window pooling. Average pooling counts padded zeros; max and
    /// median pooling ignore padded positions.
    pub fn pool2d(
        &mut self,
        input: Var,
        kind: PoolKind,
        window: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = nchw("pool2d", self.shape(input))?;
        let (kh, kw) = window;
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid(
                "pool2d",
                "window and stride must be positive",
            ));
        }
        if x.h + 2 * padding < kh || x.w + 2 * padding < kw || padding >= kh.max(kw) {
            return Err(Error::invalid(
                "pool2d",
                format!(
                    "window {window:?} with padding {padding} does not fit {}x{}",
                    x.h, x.w
                ),
            ));
        }
        let oh = (x.h + 2 * padding - kh) / stride + 1;
        let ow = (x.w + 2 * padding - kw) / stride + 1;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(x.n * x.c * oh * ow);
        let mut routes = Vec::new();
        let mut window_vals: Vec<(f64, usize)> = Vec::with_capacity(kh * kw);
        for plane in 0..x.n * x.c {
            let base = plane * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    window_vals.clear();
                    for a in 0..kh {
                        for b in 0..kw {
                            let (y, xx) = (
                                (oy * stride + a) as isize - padding as isize,
                                (ox * stride + b) as isize - padding as isize,
                            );
                            if y >= 0 && xx >= 0 && (y as usize) < x.h && (xx as usize) < x.w {
                                let idx = base + y as usize * x.w + xx as usize;
                                window_vals.push((src[idx], idx));
                            }
                        }
                    }
                    match kind {
                        PoolKind::Avg => out
                            .push(window_vals.iter().map(|v| v.0).sum::<f64>() / (kh * kw) as f64),
                        PoolKind::Max => {
                            let best = window_vals
                                .iter()
                                .fold(None::<(f64, usize)>, |best, &(v, i)| match best {
                                    Some((bv, _)) if bv >= v => best,
                                    _ => Some((v, i)),
                                })
                                .expect("window is non-empty");
                            out.push(best.0);
                            routes.push(best.1);
                        }
                        PoolKind::Median => {
                            window_vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                            let (v, i) = window_vals[(window_vals.len() - 1) / 2];
                            out.push(v);
                            routes.push(i);
                        }
                    }
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![x.n, x.c, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Pool {
                input,
                kind,
                window,
                stride,
                padding,
                routes,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        self.pool2d(x, PoolKind::Avg, (k, k), stride, padding)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        self.pool2d(x, PoolKind::Max, (k, k), stride, padding)
    }

    pub fn median_pool2d(
        &mut self,
        x: Var,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.pool2d(x, PoolKind::Median, (k, k), stride, padding)
    }

    fn rows(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] if c > 0 => Ok((r, c)),
            _ => Err(Error::invalid(
                op,
                format!("expected [rows, classes], got {:?}", self.shape(x)),
            )),
        }
    }

    /// Row-wise softmax of a `[rows, classes]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows("softmax", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows("log_softmax", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    fn check_labels(&self, op: &'static str, x: Var, labels: &[usize]) -> Result<()> {
        let (r, c) = self.rows(op, x)?;
        if labels.len() != r {
            return Err(Error::shape(op, self.shape(x), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(
                op,
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        Ok(())
    }

    /// Mean negative log-likelihood of probability rows, clamped at
    /// [`PROB_CLAMP`].
    pub fn nll_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.check_labels("nll_loss", probs, labels)?;
        let (r, c) = self.rows("nll_loss", probs)?;
        let p = self.value(probs).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p[i * c + l].max(PROB_CLAMP).ln())
            .sum::<f64>()
            / r as f64;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::NllProbs(probs, labels.into()), rg))
    }

    /// Mean negative log-likelihood of log-probability rows.
    pub fn nll_log_probs(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        self.check_labels("nll_log_probs", log_probs, labels)?;
        let (r, c) = self.rows("nll_log_probs", log_probs)?;
        let lp = self.value(log_probs).data();
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| lp[i * c + l])
            .sum::<f64>()
            / r as f64;
        let rg = self.rg(log_probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllLogProbs(log_probs, labels.into()),
            rg,
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll_log_probs(lp, labels)
    }

    fn norm_layout(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::invalid(
                op,
                format!("input {sx:?} has no channel dimension"),
            ));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(op, sx, self.shape(gamma)));
        }
        Ok((sx[0], c, sx[2..].iter().product()))
    }

    /// Training-mode batch normalization over every dimension except 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.norm_layout("batch_norm", x, gamma, beta)?;
        let m = n * inner;
        if m < 2 {
            return Err(Error::invalid(
                "batch_norm",
                "needs at least two values per channel",
            ));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, v) in src.iter().enumerate() {
            mean[(i / inner) % c] += v;
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for (i, v) in src.iter().enumerate() {
            let ch = (i / inner) % c;
            var[ch] += (v - mean[ch]).powi(2);
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, v) in src.iter().enumerate() {
            let ch = (i / inner) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, inner) = self.norm_layout("batch_norm_eval", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm_eval",
                self.shape(x),
                &[mean.len()],
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, v) in src.iter().enumerate() {
            let ch = (i / inner) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, populating gradients for every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
            }),
            Op::MulConst(x, f) => acc(*x, &mut |s| {
                for ((s, g), f) in s.iter_mut().zip(g).zip(f) {
                    *s += g * f;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *s += g;
                        }
                    }
                })
            }
            Op::Tanh(x) => acc(*x, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::ClampMax(x, c) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v < *c {
                            *s += g;
                        }
                    }
                })
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumSquares(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for (s, v) in s.iter_mut().zip(xv) {
                        *s += 2.0 * g[0] * v;
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| gemm(m, n, k, g, false, vb, true, 1.0, s));
                acc(*b, &mut |s| gemm(k, m, n, va, true, g, false, 1.0, s));
            }
            Op::AddBias(x, bias) => {
                let sx = nodes[x.0].value.shape();
                let c = sx[1];
                let inner: usize = sx[2..].iter().product();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*bias, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[(i / inner) % c] += gv;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                cols,
            } => {
                let x = nchw("conv2d", nodes[input.0].value.shape()).expect("validated");
                let ks = nodes[kernel.0].value.shape();
                let (o, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = out.shape();
                let (oh, ow) = (os[2], os[3]);
                let (ckk, p) = (x.c * kh * kw, oh * ow);
                acc(*kernel, &mut |s| {
                    for b in 0..x.n {
                        let gb = &g[b * o * p..(b + 1) * o * p];
                        gemm(
                            o,
                            p,
                            ckk,
                            gb,
                            false,
                            &cols[b * ckk * p..(b + 1) * ckk * p],
                            true,
                            1.0,
                            s,
                        );
                    }
                });
                let wdat = nodes[kernel.0].value.data();
                acc(*input, &mut |s| {
                    let mut dcol = vec![0.0; ckk * p];
                    for b in 0..x.n {
                        let gb = &g[b * o * p..(b + 1) * o * p];
                        gemm(ckk, o, p, wdat, true, gb, false, 0.0, &mut dcol);
                        let plane = x.c * x.h * x.w;
                        col2im(
                            &dcol,
                            x,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut s[b * plane..(b + 1) * plane],
                        );
                    }
                });
            }
            Op::DepthwiseFixed {
                input,
                kernel,
                size,
                pad_before,
                mode,
            } => {
                let x = nchw("depthwise", nodes[input.0].value.shape()).expect("validated");
                let plane = x.h * x.w;
                acc(*input, &mut |s| {
                    for (sp, gp) in s.chunks_mut(plane).zip(g.chunks(plane)) {
                        for i in 0..x.h {
                            for j in 0..x.w {
                                let gv = gp[i * x.w + j];
                                for a in 0..*size {
                                    for b in 0..*size {
                                        if let Some(idx) =
                                            pad_index(i + a, j + b, *pad_before, x, *mode)
                                        {
                                            sp[idx] += kernel[a * size + b] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Pool {
                input,
                kind,
                window,
                stride,
                padding,
                routes,
            } => match kind {
                PoolKind::Max | PoolKind::Median => acc(*input, &mut |s| {
                    for (gv, &r) in g.iter().zip(routes) {
                        s[r] += gv;
                    }
                }),
                PoolKind::Avg => {
                    let x = nchw("pool2d", nodes[input.0].value.shape()).expect("validated");
                    let (oh, ow) = (out.shape()[2], out.shape()[3]);
                    let (kh, kw) = *window;
                    let norm = (kh * kw) as f64;
                    acc(*input, &mut |s| {
                        for plane in 0..x.n * x.c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[(plane * oh + oy) * ow + ox] / norm;
                                    for a in 0..kh {
                                        for b in 0..kw {
                                            let y = (oy * stride + a) as isize - *padding as isize;
                                            let xx = (ox * stride + b) as isize - *padding as isize;
                                            if y >= 0
                                                && xx >= 0
                                                && (y as usize) < x.h
                                                && (xx as usize) < x.w
                                            {
                                                s[plane * x.h * x.w
                                                    + y as usize * x.w
                                                    + xx as usize] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            },
            Op::Softmax(x) => {
                let c = out.shape()[1];
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((s, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (gv - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let c = out.shape()[1];
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((s, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += gv - y.exp() * total;
                        }
                    }
                })
            }
            Op::NllProbs(x, labels) => {
                let xv = &nodes[x.0].value;
                let c = xv.shape()[1];
                let r = labels.len() as f64;
                acc(*x, &mut |s| {
                    for (i, &l) in labels.iter().enumerate() {
                        let p = xv.data()[i * c + l];
                        if p > PROB_CLAMP {
                            s[i * c + l] -= g[0] / (r * p);
                        }
                    }
                })
            }
            Op::NllLogProbs(x, labels) => {
                let c = nodes[x.0].value.shape()[1];
                let r = labels.len() as f64;
                acc(*x, &mut |s| {
                    for (i, &l) in labels.iter().enumerate() {
                        s[i * c + l] -= g[0] / r;
                    }
                })
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let sx = nodes[input.0].value.shape();
                let c = sx[1];
                let inner: usize = sx[2..].iter().product();
                let m = (sx[0] * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xh;
                }
                acc(*beta, &mut |s| {
                    s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v)
                });
                acc(*gamma, &mut |s| {
                    s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v)
                });
                let gam = nodes[gamma.0].value.data();
                acc(*input, &mut |s| {
                    for (i, ((s, gv), xh)) in s.iter_mut().zip(g).zip(xhat).enumerate() {
                        let ch = (i / inner) % c;
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            *s += scale * (gv - sum_g[ch] / m - xh * sum_gx[ch] / m);
                        } else {
                            *s += scale * gv;
                        }
                    }
                });
            }
        }
    }
}

fn pad_index(pi: usize, pj: usize, pad_before: usize, x: Nchw, mode: PadMode) -> Option<usize> {
    let i = pi as isize - pad_before as isize;
    let j = pj as isize - pad_before as isize;
    let inside = i >= 0 && j >= 0 && (i as usize) < x.h && (j as usize) < x.w;
    match (inside, mode) {
        (true, _) => Some(i as usize * x.w + j as usize),
        (false, PadMode::Zero) => None,
        (false, PadMode::Replicate) => {
            let ci = i.clamp(0, x.h as isize - 1) as usize;
            let cj = j.clamp(0, x.w as isize - 1) as usize;
            Some(ci * x.w + cj)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    x: Nchw,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let p = oh * ow;
    for c in 0..x.c {
        for a in 0..kh {
            for b in 0..kw {
                let row = &mut cols[((c * kh + a) * kw + b) * p..][..p];
                for oy in 0..oh {
                    let y = (oy * stride + a) as isize - padding as isize;
                    for ox in 0..ow {
                        let xx = (ox * stride + b) as isize - padding as isize;
                        row[oy * ow + ox] =
                            if y >= 0 && xx >= 0 && (y as usize) < x.h && (xx as usize) < x.w {
                                src[(c * x.h + y as usize) * x.w + xx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    x: Nchw,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let p = oh * ow;
    for c in 0..x.c {
        for a in 0..kh {
            for b in 0..kw {
                let row = &cols[((c * kh + a) * kw + b) * p..][..p];
                for oy in 0..oh {
                    let y = (oy * stride + a) as isize - padding as isize;
                    if y < 0 || y as usize >= x.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * stride + b) as isize - padding as isize;
                        if xx >= 0 && (xx as usize) < x.w {
                            dst[(c * x.h + y as usize) * x.w + xx as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Loss value and gradients of `loss_fn` at `weights`.
pub fn value_and_grad<F>(loss_fn: &F, weights: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = weights.iter().map(|w| tape.param(w.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    let grads = vars
        .iter()
        .zip(weights)
        .map(|(&v, w)| {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; w.numel()]);
            Tensor::new(w.shape().to_vec(), g)
        })
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

/// Hessian-vector product `H v` of `loss_fn` at `weights`.
///
/// Uses a central difference of reverse-mode gradients along the unit
/// direction `v / |v|` with step `sqrt(eps) * (1 + |w|_inf)`, then rescales
/// by `|v|`.
pub fn hvp<F>(loss_fn: &F, weights: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if weights.len() != v.len() {
        return Err(Error::invalid(
            "hvp",
            format!(
                "{} weight tensors but {} direction tensors",
                weights.len(),
                v.len()
            ),
        ));
    }
    for (w, d) in weights.iter().zip(v) {
        if w.shape() != d.shape() {
            return Err(Error::shape("hvp", w.shape(), d.shape()));
        }
    }
    let norm = v
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Ok(weights.iter().map(|w| Tensor::zeros(w.shape())).collect());
    }
    let w_inf = weights.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let h = f64::EPSILON.sqrt() * (1.0 + w_inf);
    let shifted = |sign: f64| -> Vec<Tensor> {
        weights
            .iter()
            .zip(v)
            .map(|(w, d)| {
                let data = w
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(a, b)| a + sign * h * b / norm)
                    .collect();
                Tensor::new(w.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    };
    let (_, gp) = value_and_grad(loss_fn, &shifted(1.0))?;
    let (_, gm) = value_and_grad(loss_fn, &shifted(-1.0))?;
    gp.iter()
        .zip(&gm)
        .map(|(p, m)| {
            let data = p
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (a - b) / (2.0 * h) * norm)
                .collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect()
}

/// Concatenates tensor payloads into one flat vector.
pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits `flat` into tensors shaped like `like`.
pub fn unflatten_like(flat: &[f64], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let total: usize = like.iter().map(Tensor::numel).sum();
    if total != flat.len() {
        return Err(Error::shape("unflatten", &[total], &[flat.len()]));
    }
    let mut offset = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec());
            offset += n;
            out
        })
        .collect()
}
