//! Per-pixel feature extraction and resolution alignment.
//!
//! Texture features come from a differentiable extractor ([`Extractor::RgbPatch`]
//! or [`Extractor::ConvBank`]); semantic features come from a forward-only one
//! ([`Extractor::ColorQuantize`] or tensors exported offline and loaded through
//! [`Extractor::Precomputed`]).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSpace {
    Texture,
    Semantic,
}

/// Row-major `height × width × channels` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub space: FeatureSpace,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, space: FeatureSpace) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature map", "all dims must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map", "non-finite value"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            space,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, space: FeatureSpace) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            space,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.channels, self.space)
    }

    pub fn from_image(image: &Image, space: FeatureSpace) -> Self {
        Self {
            height: image.height,
            width: image.width,
            channels: 3,
            data: image.data.clone(),
            space,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn vector(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }

    #[inline]
    pub fn vector_mut(&mut self, pixel: usize) -> &mut [f64] {
        &mut self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Fixed-seed bank of random convolution kernels with optional `|·|` rectification.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBank {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub stride: usize,
    pub rectify: bool,
    /// `count × 3 × size × size`, channel-major per kernel.
    kernels: Vec<f64>,
}

impl ConvBank {
    pub fn new(seed: u64, count: usize, size: usize, stride: usize, rectify: bool) -> Result<Self> {
        if count == 0 || size == 0 || size.is_multiple_of(2) || stride == 0 {
            return Err(Error::invalid("conv bank", "need count >= 1, odd size, stride >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((3 * size * size) as f64).sqrt();
        let kernels = (0..count * 3 * size * size)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            seed,
            count,
            size,
            stride,
            rectify,
            kernels,
        })
    }

    /// The texture extractor used throughout the test-suite: 16 kernels, 3×3, stride 2.
    pub fn standard(seed: u64) -> Self {
        Self::new(seed, 16, 3, 2, true).expect("valid parameters")
    }

    #[inline]
    fn weight(&self, k: usize, c: usize, dy: usize, dx: usize) -> f64 {
        self.kernels[((k * 3 + c) * self.size + dy) * self.size + dx]
    }

    fn linear(&self, image: &Image) -> FeatureMap {
        let (oh, ow) = (ceil_div(image.height, self.stride), ceil_div(image.width, self.stride));
        let r = (self.size / 2) as isize;
        let rows = par::map_range(oh, |oy| {
            let mut row = vec![0.0; ow * self.count];
            for ox in 0..ow {
                let cy = (oy * self.stride) as isize;
                let cx = (ox * self.stride) as isize;
                for k in 0..self.count {
                    let mut acc = 0.0;
                    for dy in 0..self.size {
                        let y = cy + dy as isize - r;
                        if y < 0 || y >= image.height as isize {
                            continue;
                        }
                        for dx in 0..self.size {
                            let x = cx + dx as isize - r;
                            if x < 0 || x >= image.width as isize {
                                continue;
                            }
                            let px = image.pixel(x as usize, y as usize);
                            for (c, v) in px.iter().enumerate() {
                                acc += self.weight(k, c, dy, dx) * v;
                            }
                        }
                    }
                    row[ox * self.count + k] = acc;
                }
            }
            row
        });
        FeatureMap {
            height: oh,
            width: ow,
            channels: self.count,
            data: rows.concat(),
            space: FeatureSpace::Texture,
        }
    }

    fn adjoint(&self, height: usize, width: usize, grad: &FeatureMap) -> Image {
        let r = (self.size / 2) as isize;
        let mut out = Image::zeros(width, height);
        for oy in 0..grad.height {
            for ox in 0..grad.width {
                let g = grad.vector(oy * grad.width + ox);
                let cy = (oy * self.stride) as isize;
                let cx = (ox * self.stride) as isize;
                for dy in 0..self.size {
                    let y = cy + dy as isize - r;
                    if y < 0 || y >= height as isize {
                        continue;
                    }
                    for dx in 0..self.size {
                        let x = cx + dx as isize - r;
                        if x < 0 || x >= width as isize {
                            continue;
                        }
                        let base = (y as usize * width + x as usize) * 3;
                        for (k, &gk) in g.iter().enumerate() {
                            if gk == 0.0 {
                                continue;
                            }
                            for c in 0..3 {
                                out.data[base + c] += self.weight(k, c, dy, dx) * gk;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Smoothed soft colour quantisation: a low-channel, forward-only stand-in for
/// a semantic encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorQuantize {
    pub palette: Vec<[f64; 3]>,
    pub sigma: f64,
    pub blur_radius: usize,
}

impl Default for ColorQuantize {
    fn default() -> Self {
        let palette = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        Self {
            palette,
            sigma: 0.35,
            blur_radius: 1,
        }
    }
}

impl ColorQuantize {
    fn apply(&self, image: &Image) -> FeatureMap {
        let blurred = box_blur(image, self.blur_radius);
        let c = self.palette.len();
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut data = Vec::with_capacity(image.pixel_count() * c);
        for p in 0..image.pixel_count() {
            let px = &blurred.data[p * 3..p * 3 + 3];
            for q in &self.palette {
                let d2: f64 = (0..3).map(|i| (px[i] - q[i]).powi(2)).sum();
                data.push((-d2 * inv).exp());
            }
        }
        FeatureMap {
            height: image.height,
            width: image.width,
            channels: c,
            data,
            space: FeatureSpace::Semantic,
        }
    }
}

fn box_blur(image: &Image, radius: usize) -> Image {
    if radius == 0 {
        return image.clone();
    }
    let mut out = Image::zeros(image.width, image.height);
    let r = radius as isize;
    for y in 0..image.height as isize {
        for x in 0..image.width as isize {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(image.height as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(image.width as isize - 1) {
                    let p = image.pixel(xx as usize, yy as usize);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            out.set_pixel(x as usize, y as usize, [acc[0] / n, acc[1] / n, acc[2] / n]);
        }
    }
    out
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// A feature extractor.
#[derive(Clone, Debug)]
pub enum Extractor {
    /// Average pooling over `patch × patch` windows placed every `stride` pixels.
    RgbPatch { patch: usize, stride: usize },
    ConvBank(ConvBank),
    ColorQuantize(ColorQuantize),
    /// Feature maps exported offline, keyed by image id.
    Precomputed {
        name: String,
        space: FeatureSpace,
        store: Arc<BTreeMap<String, FeatureMap>>,
    },
}

impl Extractor {
    pub fn name(&self) -> &str {
        match self {
            Extractor::RgbPatch { .. } => "rgb-patch",
            Extractor::ConvBank(_) => "conv-bank",
            Extractor::ColorQuantize(_) => "color-quantize",
            Extractor::Precomputed { name, .. } => name,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, Extractor::RgbPatch { .. } | Extractor::ConvBank(_))
    }

    pub fn space(&self) -> FeatureSpace {
        match self {
            Extractor::RgbPatch { .. } | Extractor::ConvBank(_) => FeatureSpace::Texture,
            Extractor::ColorQuantize(_) => FeatureSpace::Semantic,
            Extractor::Precomputed { space, .. } => *space,
        }
    }

    /// Output spatial dims for an input of the given size.
    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        match self {
            Extractor::RgbPatch { stride, .. } => (ceil_div(height, *stride), ceil_div(width, *stride)),
            Extractor::ConvBank(b) => (ceil_div(height, b.stride), ceil_div(width, b.stride)),
            Extractor::ColorQuantize(_) | Extractor::Precomputed { .. } => (height, width),
        }
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureMap> {
        match self {
            Extractor::RgbPatch { patch, stride } => Ok(patch_average(image, *patch, *stride)),
            Extractor::ConvBank(bank) => {
                let mut f = bank.linear(image);
                if bank.rectify {
                    f.data.iter_mut().for_each(|v| *v = v.abs());
                }
                Ok(f)
            }
            Extractor::ColorQuantize(q) => Ok(q.apply(image)),
            Extractor::Precomputed { name, store, .. } => {
                let key = image.id.as_deref().unwrap_or("");
                store
                    .get(key)
                    .cloned()
                    .ok_or_else(|| Error::MissingFeature(format!("{key}.{name}")))
            }
        }
    }

    /// Vector-Jacobian product of [`extract`](Self::extract) at `image`.
    pub fn backprop(&self, image: &Image, feature_grad: &FeatureMap) -> Result<Image> {
        let (oh, ow) = self.output_dims(image.height, image.width);
        if feature_grad.height != oh || feature_grad.width != ow {
            return Err(Error::Dimension(format!(
                "feature gradient is {}x{}, extractor output is {oh}x{ow}",
                feature_grad.height, feature_grad.width
            )));
        }
        match self {
            Extractor::RgbPatch { patch, stride } => {
                if feature_grad.channels != 3 {
                    return Err(Error::Dimension("rgb-patch gradient needs 3 channels".into()));
                }
                Ok(patch_average_adjoint(image.height, image.width, *patch, *stride, feature_grad))
            }
            Extractor::ConvBank(bank) => {
                if feature_grad.channels != bank.count {
                    return Err(Error::Dimension(format!(
                        "conv-bank gradient needs {} channels, got {}",
                        bank.count, feature_grad.channels
                    )));
                }
                if !bank.rectify {
                    return Ok(bank.adjoint(image.height, image.width, feature_grad));
                }
                let pre = bank.linear(image);
                let mut g = feature_grad.clone();
                for (gv, pv) in g.data.iter_mut().zip(&pre.data) {
                    // subgradient of |·|: sign, with 0 at the kink
                    *gv *= if *pv > 0.0 {
                        1.0
                    } else if *pv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                Ok(bank.adjoint(image.height, image.width, &g))
            }
            Extractor::ColorQuantize(_) => Err(Error::NotDifferentiable("color-quantize")),
            Extractor::Precomputed { .. } => Err(Error::NotDifferentiable("precomputed")),
        }
    }
}

fn patch_average(image: &Image, patch: usize, stride: usize) -> FeatureMap {
    let (oh, ow) = (ceil_div(image.height, stride), ceil_div(image.width, stride));
    let mut data = Vec::with_capacity(oh * ow * 3);
    for oy in 0..oh {
        for ox in 0..ow {
            let y1 = (oy * stride + patch).min(image.height);
            let x1 = (ox * stride + patch).min(image.width);
            let mut acc = [0.0; 3];
            let mut n = 0usize;
            for y in oy * stride..y1 {
                for x in ox * stride..x1 {
                    let p = image.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1;
                }
            }
            data.extend(acc.map(|v| v / n as f64));
        }
    }
    FeatureMap {
        height: oh,
        width: ow,
        channels: 3,
        data,
        space: FeatureSpace::Texture,
    }
}

fn patch_average_adjoint(height: usize, width: usize, patch: usize, stride: usize, grad: &FeatureMap) -> Image {
    let mut out = Image::zeros(width, height);
    for oy in 0..grad.height {
        for ox in 0..grad.width {
            let y1 = (oy * stride + patch).min(height);
            let x1 = (ox * stride + patch).min(width);
            let n = ((y1 - oy * stride) * (x1 - ox * stride)) as f64;
            let g = grad.vector(oy * grad.width + ox);
            for y in oy * stride..y1 {
                for x in ox * stride..x1 {
                    let base = (y * width + x) * 3;
                    for c in 0..3 {
                        out.data[base + c] += g[c] / n;
                    }
                }
            }
        }
    }
    out
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`).
pub fn resample_bilinear(map: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    assert!(out_h >= 1 && out_w >= 1, "output dims must be >= 1");
    if out_h == map.height && out_w == map.width {
        return map.clone();
    }
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let c = map.channels;
    let mut out = FeatureMap::zeros(out_h, out_w, c, map.space);
    for y in 0..out_h {
        let (y0, y1, ty) = src(y, map.height, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = src(x, map.width, out_w);
            let v00 = map.vector(y0 * map.width + x0);
            let v01 = map.vector(y0 * map.width + x1);
            let v10 = map.vector(y1 * map.width + x0);
            let v11 = map.vector(y1 * map.width + x1);
            let o = out.vector_mut(y * out_w + x);
            for k in 0..c {
                let top = v00[k] + (v01[k] - v00[k]) * tx;
                let bot = v10[k] + (v11[k] - v10[k]) * tx;
                o[k] = top + (bot - top) * ty;
            }
        }
    }
    out
}

/// Nearest-neighbour label resampling (labels are never blended).
pub fn downsample_mask(mask: &LabelMask, out_h: usize, out_w: usize) -> LabelMask {
    assert!(out_h >= 1 && out_w >= 1, "output dims must be >= 1");
    if out_h == mask.height && out_w == mask.width {
        return mask.clone();
    }
    let pick = |dst: usize, n_in: usize, n_out: usize| -> usize {
        (((dst as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut labels = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, mask.height, out_h);
        for x in 0..out_w {
            labels.push(mask.get(pick(x, mask.width, out_w), sy));
        }
    }
    LabelMask {
        width: out_w,
        height: out_h,
        labels,
    }
}

/// Texture extractor plus the optional semantic extractor used for matching.
#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    pub texture: Extractor,
    pub semantic: Option<Extractor>,
}

impl Default for FeaturePipeline {
    fn default() -> Self {
        Self {
            texture: Extractor::ConvBank(ConvBank::standard(7)),
            semantic: Some(Extractor::ColorQuantize(ColorQuantize::default())),
        }
    }
}

impl FeaturePipeline {
    pub fn texture_dims(&self, image: &Image) -> (usize, usize) {
        self.texture.output_dims(image.height, image.width)
    }

    /// Semantic features resampled onto the texture-feature grid.
    pub fn semantic_aligned(&self, image: &Image) -> Result<Option<FeatureMap>> {
        let Some(sem) = &self.semantic else {
            return Ok(None);
        };
        let (h, w) = self.texture_dims(image);
        Ok(Some(resample_bilinear(&sem.extract(image)?, h, w)))
    }
}
