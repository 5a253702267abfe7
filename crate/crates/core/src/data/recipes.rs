//! Synthetic stand-in datasets.
//!
//! * `shapes`: one filled or outlined shape per image (square, disk, plus,
//!   ring, triangle); class is the shape, while position, size, rotation,
//!   intensities and pixel noise are nuisances. Position jitter keeps a
//!   pixel-space linear probe well below perfect.
//! * `two-moons-images`: a Gaussian spot placed at a point of the two-moons
//!   distribution; class is the moon. Always two classes.
//! * `blobs`: per-class sign prototypes `0.5 ± a` plus isotropic noise. With
//!   zero noise, class means differ by at least `margin` on some pixel.
//!
//! * `gratings`: sinusoidal textures; class is the orientation pattern
//!   (varying along x, along y, both, both diagonals). Phase, period, mean,
//!   contrast and a random linear illumination ramp are nuisances. Random
//!   phase keeps a pixel-space linear probe near chance. Up to four classes.
//!
//! Labels are stratified (`i mod classes`) and the sample order is shuffled.
//! Pixels are quantized to multiples of 1/255 so BTDS round-trips are exact.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Recipe {
    #[serde(rename = "shapes")]
    Shapes,
    #[serde(rename = "two-moons-images", alias = "two_moons_images")]
    TwoMoonsImages,
    #[serde(rename = "blobs")]
    Blobs,
    #[serde(rename = "gratings")]
    Gratings,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Shapes => "shapes",
            Recipe::TwoMoonsImages => "two-moons-images",
            Recipe::Blobs => "blobs",
            Recipe::Gratings => "gratings",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Recipe::Shapes),
            "two-moons-images" | "two_moons_images" => Ok(Recipe::TwoMoonsImages),
            "blobs" => Ok(Recipe::Blobs),
            "gratings" => Ok(Recipe::Gratings),
            _ => Err(Error::Config(format!(
                "unknown recipe `{s}` (expected shapes, two-moons-images, blobs or gratings)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeParams {
    /// Square image side in pixels.
    pub side: usize,
    pub classes: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Minimum per-pixel separation of class means (blobs only).
    pub margin: f64,
}

impl Default for RecipeParams {
    fn default() -> Self {
        RecipeParams {
            side: 8,
            classes: 4,
            noise: 0.05,
            margin: 0.3,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn generate_toy_dataset(
    recipe: Recipe,
    n: usize,
    seed: u64,
    params: &RecipeParams,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    if params.side < 2 || params.side > u16::MAX as usize {
        return Err(Error::Config(format!(
            "image side {} out of range",
            params.side
        )));
    }
    if !(params.noise >= 0.0) {
        return Err(Error::Config(format!(
            "noise must be >= 0, got {}",
            params.noise
        )));
    }
    let classes = match recipe {
        Recipe::TwoMoonsImages => 2,
        Recipe::Gratings if !(2..=4).contains(&params.classes) => {
            return Err(Error::Config(format!(
                "gratings supports 2 to 4 classes, got {}",
                params.classes
            )))
        }
        Recipe::Shapes if !(2..=5).contains(&params.classes) => {
            return Err(Error::Config(format!(
                "shapes supports 2 to 5 classes, got {}",
                params.classes
            )))
        }
        _ if !(2..=256).contains(&params.classes) => {
            return Err(Error::Config(format!(
                "class count {} out of range",
                params.classes
            )))
        }
        _ => params.classes,
    };
    let mut order_rng = Rng::keyed(seed, &[stream::DATASET, 0]);
    let order = order_rng.permutation(n);
    let labels: Vec<usize> = order.iter().map(|&i| i % classes).collect();

    let side = params.side;
    let prototypes = match recipe {
        Recipe::Blobs => blob_prototypes(classes, side * side, params.margin, seed)?,
        _ => Vec::new(),
    };
    let mut pixels = Vec::with_capacity(n * side * side);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = Rng::keyed(seed, &[stream::DATASET, 1, i as u64]);
        let clean = match recipe {
            Recipe::Shapes => render_shape(label, side, &mut rng),
            Recipe::TwoMoonsImages => render_moon(label, side, &mut rng),
            Recipe::Blobs => prototypes[label].clone(),
            Recipe::Gratings => render_grating(label, side, &mut rng),
        };
        pixels.extend(
            clean
                .into_iter()
                .map(|v| quantize(v + params.noise * rng.normal())),
        );
    }
    Ok(Dataset {
        height: side,
        width: side,
        channels: 1,
        pixels,
        labels,
        num_classes: classes,
        source: format!("{recipe}(n={n},seed={seed},classes={classes})"),
    })
}

fn blob_prototypes(classes: usize, len: usize, margin: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(margin > 0.0 && margin <= 1.0 - 2.0 / 255.0) {
        return Err(Error::Config(format!("blob margin {margin} out of range")));
    }
    let a = (margin / 2.0 + 1.0 / 255.0).min(0.5);
    let mut rng = Rng::keyed(seed, &[stream::DATASET, 2]);
    let mut signs: Vec<Vec<bool>> = Vec::with_capacity(classes);
    while signs.len() < classes {
        let s: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.5)).collect();
        if !signs.contains(&s) {
            signs.push(s);
        }
    }
    Ok(signs
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|b| if b { 0.5 + a } else { 0.5 - a })
                .collect()
        })
        .collect())
}

fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u.abs() <= 0.75 && v.abs() <= 0.75,
        1 => u * u + v * v <= 0.8 * 0.8,
        2 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        3 => {
            let r2 = u * u + v * v;
            (0.55 * 0.55..=1.0).contains(&r2)
        }
        _ => v >= -0.8 && v <= 0.8 && u.abs() <= 0.5 * (v + 0.8),
    }
}

fn render_shape(class: usize, side: usize, rng: &mut Rng) -> Vec<f64> {
    let s = side as f64;
    let cx = s / 2.0 + rng.range(-0.2, 0.2) * s;
    let cy = s / 2.0 + rng.range(-0.2, 0.2) * s;
    let radius = rng.range(0.25, 0.45) * s;
    let theta = rng.range(0.0, TAU);
    let fg = rng.range(0.6, 1.0);
    let bg = rng.range(0.0, 0.25);
    let (sin, cos) = theta.sin_cos();
    const SUB: usize = 4;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    hits += inside_shape(class, u, v) as usize;
                }
            }
            let f = hits as f64 / (SUB * SUB) as f64;
            out.push(bg + (fg - bg) * f);
        }
    }
    out
}

fn render_moon(class: usize, side: usize, rng: &mut Rng) -> Vec<f64> {
    let t = rng.range(0.0, PI);
    let (mut x, mut y) = if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    x += 0.1 * rng.normal();
    y += 0.1 * rng.normal();
    let last = (side - 1) as f64;
    let px = (x + 1.0) / 3.0 * last;
    let py = (1.0 - (y + 0.5) / 1.5) * last;
    let fg = rng.range(0.7, 1.0);
    let bg = rng.range(0.0, 0.2);
    let sigma = side as f64 / 8.0;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let d2 = (c as f64 - px).powi(2) + (r as f64 - py).powi(2);
            out.push(bg + (fg - bg) * (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

fn render_grating(class: usize, side: usize, rng: &mut Rng) -> Vec<f64> {
    let s = side as f64;
    let k = TAU * s / rng.range(2.5, 5.0);
    let mut waves: Vec<(f64, f64)> = Vec::with_capacity(2);
    let mut wave = |base: f64, rng: &mut Rng| waves.push((base + rng.range(-0.15, 0.15), rng.range(0.0, TAU)));
    match class {
        0 => wave(0.0, rng),
        1 => wave(PI / 2.0, rng),
        2 => {
            wave(0.0, rng);
            wave(PI / 2.0, rng);
        }
        _ => {
            wave(PI / 4.0, rng);
            wave(3.0 * PI / 4.0, rng);
        }
    }
    let mut field = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let sum: f64 = waves
                .iter()
                .map(|&(t, ph)| (k * (t.cos() * u + t.sin() * v) + ph).cos())
                .sum();
            field.push(sum / waves.len() as f64);
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-9;
    let mean = rng.range(0.35, 0.65);
    let amp = rng.range(0.15, 0.35);
    let ramp_dir = rng.range(0.0, TAU);
    let ramp = 0.3 * rng.uniform();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
            let tilt = 2.0 * ramp * (ramp_dir.cos() * u + ramp_dir.sin() * v);
            out.push(mean + amp * field[y * side + x] / peak + tilt);
        }
    }
    out
}
