//! Small images, synthetic datasets, the BTDS file format and two-view
//! augmentation.

mod augment;
mod recipes;

use std::fs;
use std::path::Path;

use crate::error::{precondition, Error, Result};
use crate::tensor::Tensor;

pub use augment::{
    augment, augment_traced, two_views, AppliedTransforms, AugmentationPolicy, AugmentationStage,
    EnabledSet, TransformId, View,
};
pub use recipes::{generate_toy_dataset, Recipe, RecipeParams};

/// Row-major `height × width × channels` image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(precondition(format!(
                "invalid image dimensions {height}×{width}×{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(precondition(format!(
                "{} pixels for a {height}×{width}×{channels} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(precondition(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Labelled images sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `len · height · width · channels` values.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Recipe descriptor or source path.
    pub source: String,
}

pub const BTDS_MAGIC: &[u8; 4] = b"BTDS";
pub const BTDS_VERSION: u32 = 1;
const BTDS_HEADER: usize = 4 + 4 + 4 + 2 + 2 + 1 + 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> Image {
        let k = self.image_len();
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels[i * k..(i + 1) * k].to_vec(),
        }
    }

    /// Flattened `indices.len() × image_len` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let k = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * k..(i + 1) * k]);
        }
        Tensor::new(data, &[indices.len(), k]).expect("consistent batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let k = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * k..(i + 1) * k]);
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source: self.source.clone(),
            ..*self
        }
    }

    /// First `1 − test_fraction` of the samples for training, the rest held
    /// out.
    pub fn split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let n_train = self.len() - n_test;
        if n_test == 0 || n_train == 0 {
            return Err(precondition(format!("cannot split {} samples", self.len())));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }

    pub fn to_btds(&self) -> Result<Vec<u8>> {
        if self.num_classes > 256 {
            return Err(Error::Format(format!(
                "{} classes do not fit in a u8 label",
                self.num_classes
            )));
        }
        let h =
            u16::try_from(self.height).map_err(|_| Error::Format("height exceeds u16".into()))?;
        let w = u16::try_from(self.width).map_err(|_| Error::Format("width exceeds u16".into()))?;
        let count =
            u32::try_from(self.len()).map_err(|_| Error::Format("count exceeds u32".into()))?;
        let mut out = Vec::with_capacity(BTDS_HEADER + self.len() + self.pixels.len());
        out.extend_from_slice(BTDS_MAGIC);
        out.extend_from_slice(&BTDS_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.push(self.channels as u8);
        out.push(0);
        out.extend(self.labels.iter().map(|&l| l as u8));
        out.extend(
            self.pixels
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        Ok(out)
    }

    /// Parse BTDS bytes. The class count is one more than the largest label
    /// unless `num_classes` is given.
    pub fn from_btds(bytes: &[u8], num_classes: Option<usize>, source: &str) -> Result<Dataset> {
        if bytes.len() < BTDS_HEADER {
            return Err(Error::Truncated {
                section: "header".into(),
                needed: BTDS_HEADER,
                available: bytes.len(),
            });
        }
        if &bytes[..4] != BTDS_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"BTDS\"",
                &bytes[..4]
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let version = u32_at(4);
        if version != BTDS_VERSION {
            return Err(Error::Format(format!("unsupported BTDS version {version}")));
        }
        let count = u32_at(8) as usize;
        let (height, width) = (u16_at(12) as usize, u16_at(14) as usize);
        let channels = bytes[16] as usize;
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Format(format!(
                "invalid image dimensions {height}×{width}×{channels}"
            )));
        }
        let pixel_count = count * height * width * channels;
        let needed = BTDS_HEADER + count + pixel_count;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                section: "payload".into(),
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(Error::Format(format!(
                "{} trailing bytes after the payload",
                bytes.len() - needed
            )));
        }
        let labels: Vec<usize> = bytes[BTDS_HEADER..BTDS_HEADER + count]
            .iter()
            .map(|&b| b as usize)
            .collect();
        let max_label = labels.iter().copied().max().unwrap_or(0);
        let num_classes = num_classes.unwrap_or(max_label + 1);
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let pixels = bytes[BTDS_HEADER + count..]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Dataset {
            height,
            width,
            channels,
            pixels,
            labels,
            num_classes,
            source: source.to_string(),
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, ds.to_btds()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    Dataset::from_btds(&bytes, None, &path.display().to_string())
}
