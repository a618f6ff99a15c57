//! Dense RGB images and per-pixel label masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width × 3` image with `f64` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    /// Identity used to look up precomputed features (usually the file stem).
    pub id: Option<String>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image", "width and height must be >= 1"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            id: None,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
            id: None,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other));
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / self.data.len() as f64
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other));
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        s / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    /// MSE over the pixels of `mask` carrying `label`.
    pub fn masked_mse(&self, other: &Image, mask: &LabelMask, label: u32) -> f64 {
        assert!(self.same_dims(other));
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, &l) in mask.labels.iter().enumerate() {
            if l == label {
                for c in 0..3 {
                    let d = self.data[p * 3 + c] - other.data[p * 3 + c];
                    sum += d * d;
                }
                count += 3;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Per-pixel integer labels in `0..=max_label`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("label mask", "width and height must be >= 1"));
        }
        if labels.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn uniform(width: usize, height: usize, label: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Largest label present (the class count `M` of a `{0..M}` mask).
    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct labels present in the mask.
    pub fn distinct_labels(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}
