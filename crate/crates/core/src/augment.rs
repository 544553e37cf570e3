//! Training-time augmentation ladder: flip, RandAugment subset, resize &
//! crop, cutout, and batch-level mixup.
//!
//! Images are `[C,H,W]` tensors with values in `[0,1]`. Every stage returns
//! a fresh image of the same shape, clamped back into range.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper end of the RandAugment magnitude scale.
pub const MAX_MAGNITUDE: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub randaugment: bool,
    pub randaugment_ops: usize,
    pub randaugment_magnitude: f64,
    pub resize_crop: bool,
    /// Range of the crop's area fraction.
    pub crop_range: (f64, f64),
    /// Consumed by the trainer: disables stochastic depth when false.
    pub stochastic_depth: bool,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub mixup_prob: f64,
    pub cutout: bool,
    /// Fraction of the image area zeroed by cutout.
    pub cutout_area: f64,
    /// Consumed by the trainer: disables the learning-rate warm-up when false.
    pub warmup: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            randaugment: true,
            randaugment_ops: 2,
            randaugment_magnitude: 2.0,
            resize_crop: true,
            crop_range: (0.9, 1.0),
            stochastic_depth: true,
            mixup: true,
            mixup_alpha: 0.5,
            mixup_prob: 0.2,
            cutout: true,
            cutout_area: 0.1,
            warmup: true,
        }
    }
}

impl AugmentConfig {
    /// Every stage switched off.
    pub fn none() -> Self {
        Self {
            flip: false,
            randaugment: false,
            resize_crop: false,
            stochastic_depth: false,
            mixup: false,
            cutout: false,
            warmup: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop range ({lo}, {hi}) must lie in (0, 1]")));
        }
        for (name, p) in [("mixup_prob", self.mixup_prob), ("cutout_area", self.cutout_area)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.mixup && !(self.mixup_alpha > 0.0) {
            return Err(Error::Config("mixup_alpha must be positive".into()));
        }
        if !(0.0..=MAX_MAGNITUDE).contains(&self.randaugment_magnitude) {
            return Err(Error::Config(format!("magnitude must be in [0, {MAX_MAGNITUDE}]")));
        }
        Ok(())
    }
}

/// Reproducible per-sample generator keyed by `(seed, epoch, index)`, so the
/// stream does not depend on which worker handles a sample or when.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"augment\0");
    ChaCha8Rng::from_seed(key)
}

fn dims(image: &Tensor<f32>) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

fn clamp01(image: Tensor<f32>) -> Tensor<f32> {
    image.map(|v| v.clamp(0.0, 1.0))
}

/// Applies the enabled per-sample stages in ladder order.
pub fn augment(image: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Tensor<f32> {
    let mut out = image.clone();
    if cfg.flip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if cfg.randaugment {
        for _ in 0..cfg.randaugment_ops {
            let op = RandOp::ALL[rng.random_range(0..RandOp::ALL.len())];
            out = op.apply(&out, cfg.randaugment_magnitude, rng);
        }
    }
    if cfg.resize_crop {
        let (lo, hi) = cfg.crop_range;
        let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (_, h, w) = dims(&out);
        let side = libm::sqrt(area);
        let (ch, cw) = (side * h as f64, side * w as f64);
        let y0 = rng.random::<f64>() * (h as f64 - ch);
        let x0 = rng.random::<f64>() * (w as f64 - cw);
        out = resized_crop(&out, x0, y0, cw, ch);
    }
    if cfg.cutout && cfg.cutout_area > 0.0 {
        let (_, h, w) = dims(&out);
        let side = libm::sqrt(cfg.cutout_area * (h * w) as f64);
        let cy = rng.random::<f64>() * h as f64;
        let cx = rng.random::<f64>() * w as f64;
        out = cutout(&out, cx, cy, side);
    }
    clamp01(out)
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..c * h {
        out.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

/// Zero-fills the square of side `side` centred at `(cx, cy)`, clipped to
/// the image.
pub fn cutout(image: &Tensor<f32>, cx: f64, cy: f64, side: f64) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let mut out = image.clone();
    let half = side / 2.0;
    let lo = |v: f64| libm::round(v.max(0.0)) as usize;
    let (x0, x1) = (lo(cx - half), lo(cx + half).min(w));
    let (y0, y1) = (lo(cy - half), lo(cy + half).min(h));
    let d = out.data_mut();
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                d[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
    out
}

/// Bilinear read with zero outside the image.
fn sample_zero(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (libm::floor(fx), libm::floor(fy));
    let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1.0, y0))
        + ay * ((1.0 - ax) * at(x0, y0 + 1.0) + ax * at(x0 + 1.0, y0 + 1.0))
}

/// Bilinear read with border clamping.
fn sample_clamp(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (libm::floor(fx) as usize, libm::floor(fy) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
    let p = |xi: usize, yi: usize| plane[yi * w + xi];
    (1.0 - ay) * ((1.0 - ax) * p(x0, y0) + ax * p(x1, y0)) + ay * ((1.0 - ax) * p(x0, y1) + ax * p(x1, y1))
}

/// Crops the window `(x0, y0, cw, ch)` (continuous pixel units) and resizes
/// it back to the full image size.
pub fn resized_crop(image: &Tensor<f32>, x0: f64, y0: f64, cw: f64, ch: f64) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let mut out = vec![0.0; c * h * w];
    let (sx, sy) = (cw / w as f64, ch / h as f64);
    for k in 0..c {
        let plane = &image.data()[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = x0 + (x as f64 + 0.5) * sx;
                let py = y0 + (y as f64 + 0.5) * sy;
                out[(k * h + y) * w + x] = sample_clamp(plane, h, w, px, py);
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

/// Resamples through the inverse map `out(x, y) = in(a·[x, y] + b)` about the
/// image centre, with zero fill.
fn affine(image: &Tensor<f32>, a: [[f64; 2]; 2], b: [f64; 2]) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let (mx, my) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        let plane = &image.data()[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - mx, y as f64 + 0.5 - my);
                let sx = a[0][0] * dx + a[0][1] * dy + b[0] + mx;
                let sy = a[1][0] * dx + a[1][1] * dy + b[1] + my;
                out[(k * h + y) * w + x] = sample_zero(plane, h, w, sx, sy);
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

fn grayscale(image: &Tensor<f32>) -> Vec<f32> {
    let (c, h, w) = dims(image);
    let d = image.data();
    if c < 3 {
        return d[..h * w].to_vec();
    }
    (0..h * w).map(|i| 0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i]).collect()
}

/// `degenerate + factor·(image − degenerate)`, broadcasting a single plane
/// over channels when needed.
fn blend(image: &Tensor<f32>, degenerate: &[f32], factor: f32) -> Tensor<f32> {
    let n = degenerate.len();
    let out: Vec<f32> = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = degenerate[i % n];
            d + factor * (v - d)
        })
        .collect();
    clamp01(Tensor::new(image.shape(), out).expect("same shape"))
}

fn per_channel(image: &Tensor<f32>, f: impl Fn(&[f32]) -> Vec<f32>) -> Tensor<f32> {
    let (_, h, w) = dims(image);
    let out: Vec<f32> = image.data().chunks(h * w).flat_map(f).collect();
    Tensor::new(image.shape(), out).expect("same shape")
}

fn equalize_plane(p: &[f32]) -> Vec<f32> {
    let bin = |v: f32| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as usize;
    let mut hist = [0usize; 256];
    for &v in p {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, &c) in hist.iter().enumerate() {
        acc += c;
        cdf[i] = acc;
    }
    let first = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = p.len() - first;
    if denom == 0 {
        return p.to_vec();
    }
    p.iter().map(|&v| (cdf[bin(v)] - first) as f32 / denom as f32).collect()
}

fn autocontrast_plane(p: &[f32]) -> Vec<f32> {
    let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo < 1e-6 {
        return p.to_vec();
    }
    p.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// The RandAugment operations in use (solarize and invert are excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Brightness,
    Contrast,
    Sharpness,
    Color,
    Equalize,
    AutoContrast,
    Posterize,
}

impl RandOp {
    pub const ALL: [RandOp; 12] = [
        RandOp::Rotate,
        RandOp::TranslateX,
        RandOp::TranslateY,
        RandOp::ShearX,
        RandOp::ShearY,
        RandOp::Brightness,
        RandOp::Contrast,
        RandOp::Sharpness,
        RandOp::Color,
        RandOp::Equalize,
        RandOp::AutoContrast,
        RandOp::Posterize,
    ];

    /// Applies the op at `magnitude` on the 0..=30 scale; signed ops pick a
    /// random direction. Full-scale ranges: rotate 30°, translate 45% of the
    /// side, shear 0.3, enhancement factors ±0.9, posterize down to 4 bits.
    pub fn apply(self, image: &Tensor<f32>, magnitude: f64, rng: &mut dyn RngCore) -> Tensor<f32> {
        let level = magnitude / MAX_MAGNITUDE;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (_, h, w) = dims(image);
        match self {
            RandOp::Rotate => {
                let t = sign * level * 30f64.to_radians();
                let (s, c) = (libm::sin(t), libm::cos(t));
                affine(image, [[c, -s], [s, c]], [0.0, 0.0])
            }
            RandOp::TranslateX => affine(image, [[1.0, 0.0], [0.0, 1.0]], [sign * level * 0.45 * w as f64, 0.0]),
            RandOp::TranslateY => affine(image, [[1.0, 0.0], [0.0, 1.0]], [0.0, sign * level * 0.45 * h as f64]),
            RandOp::ShearX => affine(image, [[1.0, sign * level * 0.3], [0.0, 1.0]], [0.0, 0.0]),
            RandOp::ShearY => affine(image, [[1.0, 0.0], [sign * level * 0.3, 1.0]], [0.0, 0.0]),
            RandOp::Brightness => blend(image, &[0.0], (1.0 + sign * level * 0.9) as f32),
            RandOp::Contrast => {
                let g = grayscale(image);
                let mean = g.iter().sum::<f32>() / g.len() as f32;
                blend(image, &[mean], (1.0 + sign * level * 0.9) as f32)
            }
            RandOp::Color => {
                let g = grayscale(image);
                blend(image, &g, (1.0 + sign * level * 0.9) as f32)
            }
            RandOp::Sharpness => {
                let smooth = per_channel(image, |p| {
                    let mut out = p.to_vec();
                    for y in 1..h.saturating_sub(1) {
                        for x in 1..w.saturating_sub(1) {
                            let mut acc = 4.0 * p[y * w + x];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    acc += p[(y + dy - 1) * w + x + dx - 1];
                                }
                            }
                            out[y * w + x] = acc / 13.0;
                        }
                    }
                    out
                });
                let factor = (1.0 + sign * level * 0.9) as f32;
                let out: Vec<f32> =
                    image.data().iter().zip(smooth.data()).map(|(&v, &s)| s + factor * (v - s)).collect();
                clamp01(Tensor::new(image.shape(), out).expect("same shape"))
            }
            RandOp::Equalize => per_channel(image, equalize_plane),
            RandOp::AutoContrast => per_channel(image, autocontrast_plane),
            RandOp::Posterize => {
                let bits = 8 - libm::round(level * 4.0) as i32;
                if bits >= 8 {
                    return image.clone();
                }
                let levels = ((1u32 << bits) - 1) as f32;
                image.map(|v| libm::floorf(v.clamp(0.0, 1.0) * levels + 0.5) / levels)
            }
        }
    }
}

/// Batch-level mixup draw: sample `i` is blended with `partner[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixup {
    pub lambda: f64,
    pub partner: Vec<usize>,
}

impl Mixup {
    /// Soft-label weights of the own and partner labels; they sum to 1.
    pub fn label_weights(&self) -> (f64, f64) {
        (self.lambda, 1.0 - self.lambda)
    }

    pub fn apply(&self, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if self.partner.len() != images.len() {
            return Err(Error::Contract(format!(
                "mixup plan for {} samples applied to {}",
                self.partner.len(),
                images.len()
            )));
        }
        let l = self.lambda as f32;
        Ok(images
            .iter()
            .zip(&self.partner)
            .map(|(a, &j)| {
                let b = &images[j];
                let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| l * x + (1.0 - l) * y).collect();
                clamp01(Tensor::new(a.shape(), out).expect("same shape"))
            })
            .collect())
    }

    /// Partner labels in batch order.
    pub fn partner_labels(&self, labels: &[usize]) -> Vec<usize> {
        self.partner.iter().map(|&j| labels[j]).collect()
    }
}

/// Draws a mixup plan for a batch with the configured probability.
pub fn draw_mixup(batch: usize, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Option<Mixup> {
    if !cfg.mixup || batch < 2 || !rng.random_bool(cfg.mixup_prob) {
        return None;
    }
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).ok()?;
    let lambda = beta.sample(rng);
    let mut partner: Vec<usize> = (0..batch).collect();
    partner.shuffle(rng);
    Some(Mixup { lambda, partner })
}
