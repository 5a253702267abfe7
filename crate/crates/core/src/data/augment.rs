//! Two-view stochastic augmentation.
//!
//! Pipeline order: random resized crop, horizontal flip, color jitter,
//! grayscale, Gaussian blur, solarize. Every transform draws from its own
//! stream keyed by `(seed, sample, epoch, view, transform)`, so masking one
//! transform leaves the draws of the others untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{precondition, Error, Result};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    A,
    B,
}

impl View {
    fn index(self) -> u64 {
        match self {
            View::A => 0,
            View::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformId {
    Crop = 0,
    Flip = 1,
    Jitter = 2,
    Grayscale = 3,
    Blur = 4,
    Solarize = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnabledSet {
    pub crop: bool,
    pub flip: bool,
    pub jitter: bool,
    pub grayscale: bool,
    pub blur: bool,
    pub solarize: bool,
}

impl Default for EnabledSet {
    fn default() -> Self {
        EnabledSet {
            crop: true,
            flip: true,
            jitter: true,
            grayscale: true,
            blur: true,
            solarize: true,
        }
    }
}

/// Progressive-removal stages for the augmentation ablation, from the full
/// policy down to crops only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationStage {
    Baseline,
    NoFlip,
    NoBlur,
    NoColor,
    CropOnly,
}

impl AugmentationStage {
    pub const ALL: [AugmentationStage; 5] = [
        AugmentationStage::Baseline,
        AugmentationStage::NoFlip,
        AugmentationStage::NoBlur,
        AugmentationStage::NoColor,
        AugmentationStage::CropOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationStage::Baseline => "baseline",
            AugmentationStage::NoFlip => "no_flip",
            AugmentationStage::NoBlur => "no_blur",
            AugmentationStage::NoColor => "no_color",
            AugmentationStage::CropOnly => "crop_only",
        }
    }

    /// Each stage removes its transform on top of the previous stages.
    pub fn enabled(self) -> EnabledSet {
        let rank = AugmentationStage::ALL
            .iter()
            .position(|&s| s == self)
            .unwrap();
        EnabledSet {
            crop: true,
            flip: rank < 1,
            blur: rank < 2,
            jitter: rank < 3,
            grayscale: rank < 3,
            solarize: rank < 4,
        }
    }
}

impl fmt::Display for AugmentationStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentationStage::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p_a: f64,
    pub blur_p_b: f64,
    /// Blur sigma range in pixels for an 8-pixel image; scaled linearly
    /// with `min(height, width)`.
    pub blur_sigma: (f64, f64),
    pub solarize_p_a: f64,
    pub solarize_p_b: f64,
    pub solarize_threshold: f64,
    pub enabled: EnabledSet,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p_a: 1.0,
            blur_p_b: 0.1,
            blur_sigma: (0.1, 2.0),
            solarize_p_a: 0.0,
            solarize_p_b: 0.2,
            solarize_threshold: 0.5,
            enabled: EnabledSet::default(),
        }
    }
}

impl AugmentationPolicy {
    /// Full-image crop and every optional transform off.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p_a: 0.0,
            blur_p_b: 0.0,
            solarize_p_a: 0.0,
            solarize_p_b: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p_a", self.blur_p_a),
            ("blur_p_b", self.blur_p_b),
            ("solarize_p_a", self.solarize_p_a),
            ("solarize_p_b", self.solarize_p_b),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale ({lo}, {hi}) must lie in (0, 1]"
            )));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("invalid crop ratio ({rlo}, {rhi})")));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!("invalid blur sigma ({slo}, {shi})")));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!(
                "hue must lie in [0, 0.5], got {}",
                self.hue
            )));
        }
        Ok(())
    }

    pub fn blur_p(&self, view: View) -> f64 {
        match view {
            View::A => self.blur_p_a,
            View::B => self.blur_p_b,
        }
    }

    pub fn solarize_p(&self, view: View) -> f64 {
        match view {
            View::A => self.solarize_p_a,
            View::B => self.solarize_p_b,
        }
    }

    /// Probability that `t` fires for `view`, accounting for the mask.
    pub fn probability(&self, t: TransformId, view: View) -> f64 {
        let e = &self.enabled;
        let (on, p) = match t {
            TransformId::Crop => (e.crop, 1.0),
            TransformId::Flip => (e.flip, self.flip_p),
            TransformId::Jitter => (e.jitter, self.jitter_p),
            TransformId::Grayscale => (e.grayscale, self.grayscale_p),
            TransformId::Blur => (e.blur, self.blur_p(view)),
            TransformId::Solarize => (e.solarize, self.solarize_p(view)),
        };
        if on {
            p
        } else {
            0.0
        }
    }
}

/// Which optional transforms fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AppliedTransforms {
    pub flip: bool,
    pub jitter: bool,
    pub grayscale: bool,
    pub blur: bool,
    pub solarize: bool,
}

pub fn augment(
    image: &Image,
    policy: &AugmentationPolicy,
    view: View,
    seed: u64,
    sample: u64,
    epoch: u64,
) -> Result<Image> {
    Ok(augment_traced(image, policy, view, seed, sample, epoch)?.0)
}

pub fn augment_traced(
    image: &Image,
    policy: &AugmentationPolicy,
    view: View,
    seed: u64,
    sample: u64,
    epoch: u64,
) -> Result<(Image, AppliedTransforms)> {
    let rng = |t: TransformId| {
        Rng::keyed(
            seed,
            &[stream::AUGMENT, sample, epoch, view.index(), t as u64],
        )
    };
    let mut img = image.clone();
    let mut applied = AppliedTransforms::default();

    if policy.enabled.crop {
        img = random_resized_crop(&img, policy, &mut rng(TransformId::Crop))?;
    }
    let mut r = rng(TransformId::Flip);
    if r.bernoulli(policy.probability(TransformId::Flip, view)) {
        img = hflip(&img);
        applied.flip = true;
    }
    let mut r = rng(TransformId::Jitter);
    if r.bernoulli(policy.probability(TransformId::Jitter, view)) {
        color_jitter(&mut img, policy, &mut r);
        applied.jitter = true;
    }
    let mut r = rng(TransformId::Grayscale);
    if r.bernoulli(policy.probability(TransformId::Grayscale, view)) {
        grayscale(&mut img);
        applied.grayscale = true;
    }
    let mut r = rng(TransformId::Blur);
    if r.bernoulli(policy.probability(TransformId::Blur, view)) {
        let scale = img.height.min(img.width) as f64 / 8.0;
        let sigma = r.range(policy.blur_sigma.0, policy.blur_sigma.1) * scale;
        img = gaussian_blur(&img, sigma);
        applied.blur = true;
    }
    let mut r = rng(TransformId::Solarize);
    if r.bernoulli(policy.probability(TransformId::Solarize, view)) {
        solarize(&mut img, policy.solarize_threshold);
        applied.solarize = true;
    }
    for p in &mut img.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok((img, applied))
}

/// Independent draws for the two views of one sample.
pub fn two_views(
    image: &Image,
    policy: &AugmentationPolicy,
    seed: u64,
    sample: u64,
    epoch: u64,
) -> Result<(Image, Image)> {
    Ok((
        augment(image, policy, View::A, seed, sample, epoch)?,
        augment(image, policy, View::B, seed, sample, epoch)?,
    ))
}

/// Crop window `(x0, y0, w, h)` in continuous pixel units.
fn sample_crop(
    h: usize,
    w: usize,
    policy: &AugmentationPolicy,
    rng: &mut Rng,
) -> (f64, f64, f64, f64) {
    let (hf, wf) = (h as f64, w as f64);
    let area = hf * wf;
    let (lr_lo, lr_hi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.range(policy.crop_scale.0, policy.crop_scale.1);
        let ratio = rng.range(lr_lo, lr_hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= wf && ch <= hf {
            let x0 = rng.range(0.0, wf - cw);
            let y0 = rng.range(0.0, hf - ch);
            return (x0, y0, cw, ch);
        }
    }
    (0.0, 0.0, wf, hf)
}

fn random_resized_crop(img: &Image, policy: &AugmentationPolicy, rng: &mut Rng) -> Result<Image> {
    let (x0, y0, cw, ch) = sample_crop(img.height, img.width, policy, rng);
    if cw < 1.0 || ch < 1.0 {
        return Err(precondition(format!(
            "degenerate crop window {cw:.3}×{ch:.3} pixels"
        )));
    }
    Ok(resize_window(img, x0, y0, cw, ch))
}

/// Bilinear resample of a window back to the image size with half-pixel
/// centers and clamp-to-edge borders.
pub(crate) fn resize_window(img: &Image, x0: f64, y0: f64, cw: f64, ch: f64) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = vec![0.0; h * w * c];
    let sy = ch / h as f64;
    let sx = cw / w as f64;
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    for i in 0..h {
        let fy = clamp(y0 + (i as f64 + 0.5) * sy - 0.5, h);
        let (ya, ty) = (fy.floor() as usize, fy - fy.floor());
        let yb = (ya + 1).min(h - 1);
        for j in 0..w {
            let fx = clamp(x0 + (j as f64 + 0.5) * sx - 0.5, w);
            let (xa, tx) = (fx.floor() as usize, fx - fx.floor());
            let xb = (xa + 1).min(w - 1);
            for k in 0..c {
                let top = img.get(ya, xa, k) * (1.0 - tx) + img.get(ya, xb, k) * tx;
                let bottom = img.get(yb, xa, k) * (1.0 - tx) + img.get(yb, xb, k) * tx;
                out[(i * w + j) * c + k] = if ty == 0.0 {
                    top
                } else {
                    top * (1.0 - ty) + bottom * ty
                };
            }
        }
    }
    Image {
        pixels: out,
        ..*img
    }
}

fn hflip(img: &Image) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in (0..w).rev() {
            for k in 0..c {
                out.push(img.get(y, x, k));
            }
        }
    }
    Image {
        pixels: out,
        ..*img
    }
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Brightness, contrast, saturation and hue in that fixed order.
/// Saturation and hue only apply to 3-channel images.
fn color_jitter(img: &mut Image, policy: &AugmentationPolicy, rng: &mut Rng) {
    let b = rng.range(1.0 - policy.brightness, 1.0 + policy.brightness);
    let c = rng.range(1.0 - policy.contrast, 1.0 + policy.contrast);
    let s = rng.range(1.0 - policy.saturation, 1.0 + policy.saturation);
    let hue = rng.range(-policy.hue, policy.hue);

    for p in &mut img.pixels {
        *p = (*p * b).clamp(0.0, 1.0);
    }
    let mean = if img.channels == 3 {
        img.pixels.chunks(3).map(luma).sum::<f64>() / (img.height * img.width) as f64
    } else {
        img.pixels.iter().sum::<f64>() / img.pixels.len() as f64
    };
    for p in &mut img.pixels {
        *p = ((*p - mean) * c + mean).clamp(0.0, 1.0);
    }
    if img.channels != 3 {
        return;
    }
    for px in img.pixels.chunks_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = (g + (*v - g) * s).clamp(0.0, 1.0);
        }
    }
    // hue: rotation about the gray axis by 2π·hue
    let (sin, cos) = (std::f64::consts::TAU * hue).sin_cos();
    let k = (1.0 - cos) / 3.0;
    let r = 3f64.sqrt().recip() * sin;
    let m = [
        [cos + k, k - r, k + r],
        [k + r, cos + k, k - r],
        [k - r, k + r, cos + k],
    ];
    for px in img.pixels.chunks_mut(3) {
        let v = [px[0], px[1], px[2]];
        for (o, row) in px.iter_mut().zip(&m) {
            *o = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).clamp(0.0, 1.0);
        }
    }
}

fn grayscale(img: &mut Image) {
    if img.channels != 3 {
        return;
    }
    for px in img.pixels.chunks_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
}

/// Separable Gaussian blur truncated at `2σ`, clamp-to-edge borders.
fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w, c) = (img.height as isize, img.width as isize, img.channels);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    let mut s = 0.0;
                    for (t, kv) in kernel.iter().enumerate() {
                        let d = t as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        s += kv * src[((yy * w + xx) as usize) * c + k];
                    }
                    out[((y * w + x) as usize) * c + k] = s;
                }
            }
        }
        out
    };
    let tmp = pass(&img.pixels, true);
    Image {
        pixels: pass(&tmp, false),
        ..*img
    }
}

fn solarize(img: &mut Image, threshold: f64) {
    for p in &mut img.pixels {
        if *p >= threshold {
            *p = 1.0 - *p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = ramp(8, 8, 3);
        let out = augment(&img, &AugmentationPolicy::identity(), View::B, 1, 2, 3).unwrap();
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn solarize_definition() {
        let mut img = Image::new(1, 2, 1, vec![0.8, 0.3]).unwrap();
        solarize(&mut img, 0.5);
        assert!((img.pixels[0] - 0.2).abs() < 1e-15);
        assert_eq!(img.pixels[1], 0.3);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(3, 5, 3);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::new(5, 5, 1, vec![0.4; 25]).unwrap();
        for p in gaussian_blur(&img, 1.3).pixels {
            assert!((p - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_rotation_keeps_gray() {
        let mut img = Image::new(1, 1, 3, vec![0.3, 0.3, 0.3]).unwrap();
        let policy = AugmentationPolicy {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..Default::default()
        };
        color_jitter(&mut img, &policy, &mut Rng::new(4));
        for p in img.pixels {
            assert!((p - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let img = ramp(8, 8, 1);
        let policy = AugmentationPolicy {
            crop_scale: (0.001, 0.001),
            ..AugmentationPolicy::identity()
        };
        assert!(augment(&img, &policy, View::A, 0, 0, 0).is_err());
    }

    #[test]
    fn stages_remove_progressively() {
        let counts: Vec<usize> = AugmentationStage::ALL
            .iter()
            .map(|s| {
                let e = s.enabled();
                [e.flip, e.jitter, e.grayscale, e.blur, e.solarize]
                    .iter()
                    .filter(|&&b| b)
                    .count()
            })
            .collect();
        assert_eq!(counts, vec![5, 4, 3, 1, 0]);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            blur_p_b: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationPolicy {
            crop_scale: (0.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
