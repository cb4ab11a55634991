//! Datasets: binary formats, synthetic shapes, augmentation, corruptions
//! and shift sequences.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream, Rng};
use crate::tensor::Tensor;

/// Images `[n, c, h, w]` with values in `[0, 1]` and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("images {shape:?} do not match {} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {bad} >= class count {classes}"),
            ));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_outer(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    pub fn head(&self, n: usize) -> Result<Self> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Splits off the first `n` examples.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let n = n.min(self.len());
        let mut a = self.subset(&(0..n).collect::<Vec<_>>())?;
        let mut b = self.subset(&(n..self.len()).collect::<Vec<_>>())?;
        a.split = format!("{}-a", self.split);
        b.split = format!("{}-b", self.split);
        Ok((a, b))
    }

    /// Copy with every example repeated `times` times in a row.
    pub fn repeat(&self, times: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&rows)
    }

    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        Self::new(
            images,
            self.labels.clone(),
            self.classes,
            self.split.clone(),
        )
    }

    /// Index batches of at most `batch_size`, shuffled when `rng` is given.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Decoded IDX array: dimensions and raw unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX file holding unsigned bytes (type code 0x08).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(
            0,
            format!("header needs 4 bytes, file has {}", bytes.len()),
        ));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(
            2,
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(parse_err(
            bytes.len(),
            format!("expected {header} header bytes, got {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(parse_err(
            bytes.len().min(expected),
            format!("expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Builds a dataset from an IDX image array (`[n, h, w]` or `[n, c, h, w]`)
/// and an IDX label vector.
pub fn dataset_from_idx(
    images: &IdxArray,
    labels: &IdxArray,
    classes: Option<usize>,
) -> Result<Dataset> {
    let shape = match images.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, c, h, w] => vec![n, c, h, w],
        d => {
            return Err(parse_err(
                3,
                format!("image array must have 3 or 4 dims, got {}", d.len()),
            ))
        }
    };
    if labels.dims.len() != 1 || labels.dims[0] != shape[0] {
        return Err(parse_err(
            3,
            format!(
                "label dims {:?} do not match {} images",
                labels.dims, shape[0]
            ),
        ));
    }
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let data = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(Tensor::new(shape, data)?, labels, classes, "idx")
}

pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let imgs = parse_idx(&std::fs::read(images)?)?;
    let labs = parse_idx(&std::fs::read(labels)?)?;
    dataset_from_idx(&imgs, &labs, classes)
}

/// IDX image and label arrays of a dataset; pixels are rounded to bytes.
pub fn dataset_to_idx(ds: &Dataset) -> (IdxArray, IdxArray) {
    let images = IdxArray {
        dims: ds.images.shape().to_vec(),
        data: ds.images.data().iter().map(|&v| to_byte(v)).collect(),
    };
    let labels = IdxArray {
        dims: vec![ds.len()],
        data: ds.labels.iter().map(|&l| l as u8).collect(),
    };
    (images, labels)
}

pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (i, l) = dataset_to_idx(ds);
    std::fs::write(images, encode_idx(&i))?;
    std::fs::write(labels, encode_idx(&l))?;
    Ok(())
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Label layout of CIFAR binary records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarLayout {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is used.
    Cifar100,
}

impl CifarLayout {
    fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1,
            CifarLayout::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }
}

pub fn parse_cifar(bytes: &[u8], layout: CifarLayout) -> Result<Dataset> {
    let record = layout.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        let whole = bytes.len() / record;
        return Err(parse_err(
            whole * record,
            format!(
                "expected a multiple of {record} bytes, got {} (record {} is truncated)",
                bytes.len(),
                whole
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks(record).enumerate() {
        let label = rec[layout.label_bytes() - 1] as usize;
        if label >= layout.classes() {
            return Err(parse_err(
                i * record + layout.label_bytes() - 1,
                format!("label {label} out of range"),
            ));
        }
        labels.push(label);
        data.extend(
            rec[layout.label_bytes()..]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Dataset::new(images, labels, layout.classes(), "cifar")
}

pub fn load_cifar_binary(path: &Path, layout: CifarLayout) -> Result<Dataset> {
    parse_cifar(&std::fs::read(path)?, layout)
}

/// Encodes 3x32x32 images as CIFAR records (coarse label written as 0).
pub fn encode_cifar(ds: &Dataset, layout: CifarLayout) -> Result<Vec<u8>> {
    if ds.image_shape() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::invalid("cifar", "images must be 3x32x32"));
    }
    let mut out = Vec::with_capacity(ds.len() * (CIFAR_PIXELS + 2));
    for (i, &label) in ds.labels.iter().enumerate() {
        if layout == CifarLayout::Cifar100 {
            out.push(0);
        }
        out.push(label as u8);
        let px = &ds.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        out.extend(px.iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

pub const MAX_SHAPE_CLASSES: usize = 8;

/// Knobs of the synthetic shape generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Foreground/background contrast range.
    #[serde(default = "default_contrast")]
    pub contrast: (f64, f64),
}

fn default_noise() -> f64 {
    0.05
}

fn default_contrast() -> (f64, f64) {
    (0.3, 0.6)
}

impl SynthParams {
    pub fn new(n: usize, classes: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            classes,
            size,
            seed,
            noise: default_noise(),
            contrast: default_contrast(),
        }
    }
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let t = r / 3.0;
    match class {
        0 => dx.abs() < r && dy.abs() < r,
        1 => dx * dx + dy * dy < r * r,
        2 => dy.abs() < t && dx.abs() < r * 1.2,
        3 => dx.abs() < t && dy.abs() < r * 1.2,
        4 => (dy.abs() < t && dx.abs() < r * 1.2) || (dx.abs() < t && dy.abs() < r * 1.2),
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 < r * r && d2 > (0.55 * r) * (0.55 * r)
        }
        6 => dy.abs() < r && dx.abs() < (dy + r) / 2.0,
        _ => dx.abs() < r && dy.abs() < r && ((dx - dy).abs() < t || (dx + dy).abs() < t),
    }
}

/// Three-channel images of up to eight shape classes (square, disc, bars,
/// plus, ring, triangle, diagonal cross) with random position, scale, tint
/// and brightness. Labels cycle through the classes before shuffling.
pub fn synth_shapes(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    synth_shapes_with(&SynthParams::new(n, classes, size, seed))
}

pub fn synth_shapes_with(p: &SynthParams) -> Result<Dataset> {
    if p.size < 16 {
        return Err(Error::invalid(
            "synth_shapes",
            format!("size must be >= 16, got {}", p.size),
        ));
    }
    if p.classes == 0 || p.classes > MAX_SHAPE_CLASSES {
        return Err(Error::invalid(
            "synth_shapes",
            format!(
                "classes must be in 1..={MAX_SHAPE_CLASSES}, got {}",
                p.classes
            ),
        ));
    }
    if !(p.noise >= 0.0) || !(p.contrast.0 <= p.contrast.1) {
        return Err(Error::invalid(
            "synth_shapes",
            "invalid noise or contrast range",
        ));
    }
    let mut labels: Vec<usize> = (0..p.n).map(|i| i % p.classes).collect();
    labels.shuffle(&mut rng_from(p.seed, &[stream::SHUFFLE]));
    let s = p.size;
    let plane = s * s;
    let mut data = vec![0.0; p.n * 3 * plane];
    let noise = Normal::new(0.0, p.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = rng_from(p.seed, &[stream::DATA, i as u64]);
        let sf = s as f64;
        let cx = rng.gen_range(0.35..0.65) * sf;
        let cy = rng.gen_range(0.35..0.65) * sf;
        let r = rng.gen_range(0.18..0.28) * sf;
        let bg = rng.gen_range(0.1..0.4);
        let fg = bg + rng.gen_range(p.contrast.0..=p.contrast.1);
        let tint: [f64; 3] = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let v = if inside(label, dx, dy, r) { fg } else { bg };
                for (c, t) in tint.iter().enumerate() {
                    let eps = if p.noise > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    img[c * plane + y * s + x] = (v * t + eps).clamp(0.0, 1.0);
                }
            }
        }
    }
    let images = Tensor::new(vec![p.n, 3, s, s], data)?;
    Dataset::new(images, labels, p.classes, "synth")
}

/// Mirror index without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Reflect-pads by `pad`, crops a random window of the original size and
/// flips horizontally with probability 1/2 when `flip` is set.
pub fn augment(batch: &Tensor, pad: usize, flip: bool, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from(seed, &[stream::AUGMENT]);
    augment_with(batch, pad, flip, &mut rng)
}

pub fn augment_with(batch: &Tensor, pad: usize, flip: bool, rng: &mut Rng) -> Result<Tensor> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::invalid(
            "augment",
            format!("expected [n, c, h, w], got {:?}", batch.shape()),
        ));
    };
    if pad >= h.min(w) {
        return Err(Error::invalid(
            "augment",
            format!("pad {pad} too large for {h}x{w} images"),
        ));
    }
    let src = batch.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        let oy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flipped = flip && rng.gen_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = reflect(y as isize + oy, h);
                for x in 0..w {
                    let xx = if flipped { w - 1 - x } else { x };
                    let sx = reflect(xx as isize + ox, w);
                    out[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::GaussianNoise,
        Corruption::ImpulseNoise,
        Corruption::GaussianBlur,
        Corruption::Brightness,
        Corruption::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::GaussianBlur => "gaussian_blur",
            Corruption::Brightness => "brightness",
            Corruption::Contrast => "contrast",
        }
    }

    /// Parameter at severities 1..=5: noise std, flip probability, blur
    /// std in pixels, additive brightness, contrast factor.
    pub fn ladder(self) -> [f64; 5] {
        match self {
            Corruption::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            Corruption::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            Corruption::GaussianBlur => [0.4, 0.6, 0.7, 0.8, 1.0],
            Corruption::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            Corruption::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
        }
    }

    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(
                "corrupt",
                format!("severity must be 1..=5, got {severity}"),
            ));
        }
        Ok(self.ladder()[severity as usize - 1])
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid("corrupt", format!("unknown corruption type `{s}`")))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with reflect boundaries, per channel.
fn blur_planes(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for plane in data.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
}

/// Applies one corruption at `severity` (1..=5); output clipped to `[0, 1]`.
pub fn corrupt(ds: &Dataset, kind: Corruption, severity: u8, seed: u64) -> Result<Dataset> {
    let param = kind.parameter(severity)?;
    let (c, h, w) = ds.image_shape();
    let mut data = ds.images.data().to_vec();
    let image = c * h * w;
    for (i, img) in data.chunks_mut(image.max(1)).enumerate() {
        let mut rng = rng_from(seed, &[stream::NOISE, i as u64]);
        match kind {
            Corruption::GaussianNoise => {
                let normal = Normal::new(0.0, param).expect("positive std");
                for v in img.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            Corruption::ImpulseNoise => {
                for v in img.iter_mut() {
                    if rng.gen_bool(param) {
                        *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                    }
                }
            }
            Corruption::GaussianBlur => blur_planes(img, h, w, param),
            Corruption::Brightness => img.iter_mut().for_each(|v| *v += param),
            Corruption::Contrast => {
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                img.iter_mut().for_each(|v| *v = (*v - mean) * param + mean);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let mut out = ds.with_images(Tensor::new(ds.images.shape().to_vec(), data)?)?;
    out.split = format!("{}-{}-{}", ds.split, kind.name(), severity);
    Ok(out)
}

/// Corrupted copies of one dataset for every (type, severity) cell.
#[derive(Clone, Debug)]
pub struct CorruptionGrid {
    pub cells: Vec<(Corruption, u8, Dataset)>,
}

impl CorruptionGrid {
    pub fn build(ds: &Dataset, kinds: &[Corruption], severities: &[u8], seed: u64) -> Result<Self> {
        let mut cells = Vec::with_capacity(kinds.len() * severities.len());
        for (ki, &kind) in kinds.iter().enumerate() {
            for &s in severities {
                let cell_seed = derive_seed(seed, &[stream::NOISE, ki as u64, s as u64]);
                cells.push((kind, s, corrupt(ds, kind, s, cell_seed)?));
            }
        }
        Ok(Self { cells })
    }

    pub fn get(&self, kind: Corruption, severity: u8) -> Option<&Dataset> {
        self.cells
            .iter()
            .find(|(k, s, _)| *k == kind && *s == severity)
            .map(|(_, _, d)| d)
    }
}

/// `steps + 1` horizontally translated copies of a `[c, h, w]` (or
/// `[1, c, h, w]`) image; frame `i` is shifted right by `i * stride`
/// pixels with reflect fill.
pub fn shift_sequence(image: &Tensor, steps: usize, stride: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        s => {
            return Err(Error::invalid(
                "shift_sequence",
                format!("expected one image, got {s:?}"),
            ))
        }
    };
    if steps * stride >= w {
        return Err(Error::invalid(
            "shift_sequence",
            format!("{steps} steps of {stride} px overflow width {w}"),
        ));
    }
    let src = image.data();
    Ok((0..=steps)
        .map(|i| {
            let shift = (i * stride) as isize;
            Tensor::from_fn(&[1, c, h, w], |idx| {
                let x = idx % w;
                let row = idx / w;
                src[row * w + reflect(x as isize - shift, w)]
            })
        })
        .collect())
}
