//! On-disk formats: CTNS tensors, grid checkpoints, view bundles, PNG images
//! and masks, task files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feat::{Extractor, FeatureMap, FeaturePipeline, FeatureSpace};
use crate::grid::{GridHeader, VoxelGrid};
use crate::image::{Image, LabelMask};
use crate::loss::LossConfig;
use crate::render::Camera;
use crate::stylize::{Binding, OptimConfig, StyleTarget, TaskMode, TaskSpec, View};

pub const CTNS_MAGIC: &[u8; 4] = b"CTNS";
pub const CTNS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
            TensorData::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

/// Row-major tensor as stored in a CTNS container.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format("tensor rank or extent too large".into()));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Values widened to f64; integer tensors convert exactly.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Format("expected a float32 tensor".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => payload.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        }
        let mut out = Vec::with_capacity(payload.len() + 14 + 4 * self.dims.len());
        out.extend_from_slice(CTNS_MAGIC);
        out.extend_from_slice(&CTNS_VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 10 || &bytes[..4] != CTNS_MAGIC {
            return Err(bad("not a CTNS container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CTNS_VERSION {
            return Err(Error::Format(format!("unsupported CTNS version {version}")));
        }
        let code = bytes[8];
        let ndim = bytes[9] as usize;
        let header = 10 + 4 * ndim;
        if bytes.len() < header + 4 {
            return Err(bad("truncated CTNS header"));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor extent overflows"))?;
        let width = match code {
            0 | 2 => 4,
            1 => 1,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        };
        let payload_len = count.checked_mul(width).ok_or_else(|| bad("tensor extent overflows"))?;
        if bytes.len() != header + payload_len + 4 {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims require {payload_len}",
                bytes.len().saturating_sub(header + 4)
            )));
        }
        let payload = &bytes[header..header + payload_len];
        let crc = u32::from_le_bytes(bytes[header + payload_len..].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            return Err(bad("CRC mismatch"));
        }
        let data = match code {
            0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::U8(payload.to_vec()),
            _ => TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { dims, data })
    }
}

pub fn write_ctns(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.encode())?;
    Ok(())
}

pub fn read_ctns(path: &Path) -> Result<Tensor> {
    Tensor::decode(&fs::read(path)?)
}

pub fn feature_to_tensor(map: &FeatureMap) -> Tensor {
    Tensor {
        dims: vec![map.height, map.width, map.channels],
        data: TensorData::F32(map.data.iter().map(|&v| v as f32).collect()),
    }
}

pub fn tensor_to_feature(t: &Tensor, space: FeatureSpace) -> Result<FeatureMap> {
    let [h, w, c] = t.dims[..] else {
        return Err(Error::Format(format!("feature tensor must be [H, W, C], got {:?}", t.dims)));
    };
    FeatureMap::new(h, w, c, t.to_f64(), space)
}

/// Writes `density.ctns`, `sh.ctns` and `grid.json` into `dir`.
pub fn save_grid(dir: &Path, grid: &VoxelGrid) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [nx, ny, nz] = grid.dims();
    write_ctns(&dir.join("density.ctns"), &Tensor::f32(vec![nz, ny, nx], grid.density().to_vec())?)?;
    write_ctns(
        &dir.join("sh.ctns"),
        &Tensor::f32(vec![nz, ny, nx, 3, grid.basis_count()], grid.sh().to_vec())?,
    )?;
    fs::write(dir.join("grid.json"), serde_json::to_string_pretty(&grid.header())? + "\n")?;
    Ok(())
}

pub fn load_grid(dir: &Path) -> Result<VoxelGrid> {
    let header: GridHeader = serde_json::from_str(&fs::read_to_string(dir.join("grid.json"))?)?;
    let density = read_ctns(&dir.join("density.ctns"))?;
    let sh = read_ctns(&dir.join("sh.ctns"))?;
    let [nx, ny, nz] = header.dims;
    let b = crate::grid::basis_count(header.sh_degree);
    if density.dims != [nz, ny, nx] || sh.dims != [nz, ny, nx, 3, b] {
        return Err(Error::Format("checkpoint tensors do not match grid.json".into()));
    }
    VoxelGrid::from_parts(header, density.into_f32()?, sh.into_f32()?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    write_png_raw(path, image.width, image.height, png::ColorType::Rgb, &bytes)
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let bytes = mask
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit an 8-bit mask"))))
        .collect::<Result<Vec<u8>>>()?;
    write_png_raw(path, mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

fn write_png_raw(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(bytes).map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn read_png_raw(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Reads an 8-bit PNG as RGB in `[0, 1]`; grey and alpha channels are folded.
pub fn read_png(path: &Path) -> Result<Image> {
    let (w, h, color, buf) = read_png_raw(path)?;
    let ch = color.samples();
    let data = buf
        .chunks_exact(ch)
        .flat_map(|px| {
            let rgb = if ch >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
            rgb.map(|v| f64::from(v) / 255.0)
        })
        .collect();
    Image::new(w, h, data)
}

pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let (w, h, color, buf) = read_png_raw(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::Format(format!("{}: masks must be single-channel", path.display())));
    }
    LabelMask::new(w, h, buf.into_iter().map(u32::from).collect())
}

/// Camera entry of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Row-major camera-to-world rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            rotation: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            translation: c.translation,
            focal: c.focal,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;
    fn try_from(r: &CameraRecord) -> Result<Self> {
        let m = &r.rotation;
        let cam = Camera {
            rotation: [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
            translation: r.translation,
            focal: r.focal,
            width: r.width,
            height: r.height,
            near: r.near,
            far: r.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(&fs::read_to_string(path)?)?;
    records.iter().map(Camera::try_from).collect()
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    fs::write(path, serde_json::to_string_pretty(&records)? + "\n")?;
    Ok(())
}

/// Extractor names whose files hold semantic features.
pub fn space_for_extractor(name: &str) -> FeatureSpace {
    if name.starts_with("semantic") || name == "color-quantize" {
        FeatureSpace::Semantic
    } else {
        FeatureSpace::Texture
    }
}

/// A directory of views: images, optional masks, cameras and feature files.
#[derive(Clone, Debug, Default)]
pub struct Bundle {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Option<Vec<LabelMask>>,
    /// Extractor name → one feature map per view.
    pub features: BTreeMap<String, Vec<FeatureMap>>,
}

fn view_name(i: usize) -> String {
    format!("{i:03}")
}

impl Bundle {
    pub fn read(dir: &Path) -> Result<Self> {
        let cam_path = dir.join("cameras.json");
        if !cam_path.is_file() {
            return Err(Error::Format(format!("{} is missing", cam_path.display())));
        }
        let cameras = read_cameras(&cam_path)?;
        let mut images = Vec::with_capacity(cameras.len());
        let mut masks = Vec::new();
        for (i, cam) in cameras.iter().enumerate() {
            let img = read_png(&dir.join("views").join(format!("{}.png", view_name(i))))?.with_id(view_name(i));
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::Format(format!("view {i} does not match its camera resolution")));
            }
            images.push(img);
            let mp = dir.join("masks").join(format!("{}.png", view_name(i)));
            if mp.is_file() {
                masks.push(read_mask_png(&mp)?);
            }
        }
        if dir.join("views").join(format!("{}.png", view_name(cameras.len()))).exists() {
            return Err(Error::Format("more views than camera entries".into()));
        }
        let masks = match masks.len() {
            0 => None,
            n if n == cameras.len() => Some(masks),
            _ => return Err(Error::Format("masks must exist for every view or none".into())),
        };
        let mut features: BTreeMap<String, Vec<Option<FeatureMap>>> = BTreeMap::new();
        let fdir = dir.join("features");
        if fdir.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&fdir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            entries.sort();
            for path in entries {
                let Some(fname) = path.file_name().and_then(|s| s.to_str()) else { continue };
                let Some(stem) = fname.strip_suffix(".ctns") else { continue };
                let Some((idx, extractor)) = stem.split_once('.') else { continue };
                let Ok(i) = idx.parse::<usize>() else { continue };
                if i >= cameras.len() {
                    return Err(Error::Format(format!("feature file {fname} has no view")));
                }
                let map = tensor_to_feature(&read_ctns(&path)?, space_for_extractor(extractor))?;
                let slot = features.entry(extractor.to_string()).or_insert_with(|| vec![None; cameras.len()]);
                slot[i] = Some(map);
            }
        }
        let features = features
            .into_iter()
            .map(|(name, maps)| {
                let maps = maps
                    .into_iter()
                    .enumerate()
                    .map(|(i, m)| m.ok_or_else(|| Error::Format(format!("view {i} lacks {name} features"))))
                    .collect::<Result<Vec<_>>>()?;
                let (c0, shape0) = (maps[0].channels, (maps[0].height, maps[0].width));
                if maps.iter().any(|m| m.channels != c0 || (m.height, m.width) != shape0) {
                    return Err(Error::Format(format!("{name} feature dims differ between views")));
                }
                Ok((name, maps))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            cameras,
            images,
            masks,
            features,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("views"))?;
        write_cameras(&dir.join("cameras.json"), &self.cameras)?;
        for (i, img) in self.images.iter().enumerate() {
            write_png(&dir.join("views").join(format!("{}.png", view_name(i))), img)?;
        }
        if let Some(masks) = &self.masks {
            fs::create_dir_all(dir.join("masks"))?;
            for (i, m) in masks.iter().enumerate() {
                write_mask_png(&dir.join("masks").join(format!("{}.png", view_name(i))), m)?;
            }
        }
        if !self.features.is_empty() {
            fs::create_dir_all(dir.join("features"))?;
        }
        for (name, maps) in &self.features {
            for (i, m) in maps.iter().enumerate() {
                write_ctns(&dir.join("features").join(format!("{}.{name}.ctns", view_name(i))), &feature_to_tensor(m))?;
            }
        }
        Ok(())
    }

    /// Views with masks (label 0 everywhere when the bundle has none).
    pub fn views(&self) -> Result<Vec<View>> {
        self.cameras
            .iter()
            .zip(&self.images)
            .enumerate()
            .map(|(i, (c, img))| {
                let mask = match &self.masks {
                    Some(m) => m[i].clone(),
                    None => LabelMask::uniform(img.width, img.height, 0),
                };
                View::new(c.clone(), img.clone(), mask)
            })
            .collect()
    }

    /// Stored features of one extractor as a lookup keyed by view id.
    pub fn precomputed(&self, name: &str) -> Option<Extractor> {
        let maps = self.features.get(name)?;
        let store = maps.iter().enumerate().map(|(i, m)| (view_name(i), m.clone())).collect();
        Some(Extractor::Precomputed {
            name: name.to_string(),
            space: space_for_extractor(name),
            store: Arc::new(store),
        })
    }

    /// First stored semantic feature set, if any.
    pub fn semantic_features(&self) -> Option<(&str, &[FeatureMap])> {
        self.features
            .iter()
            .find(|(n, _)| space_for_extractor(n) == FeatureSpace::Semantic)
            .map(|(n, m)| (n.as_str(), m.as_slice()))
    }
}

/// One entry of a task file's `labels` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub preserve: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_mask: Option<PathBuf>,
    /// Semantic features of the style image (CTNS `[H, W, C]`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_semantic: Option<PathBuf>,
}

/// `task.json`. Style paths are relative to the task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub mode: TaskMode,
    pub labels: Vec<LabelEntry>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lambda_tv")]
    pub lambda_tv: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub views_per_step: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    LossConfig::default().alpha
}
fn default_lambda() -> f64 {
    LossConfig::default().lambda
}
fn default_lambda_tv() -> f64 {
    LossConfig::default().lambda_tv
}
fn default_steps() -> usize {
    OptimConfig::default().steps
}
fn default_step_size() -> f64 {
    OptimConfig::default().step_size
}

impl TaskFile {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Loads style images and builds the task. Entries naming the same style
    /// image and mask share one style target.
    pub fn resolve(&self, base: &Path, pipeline: &FeaturePipeline) -> Result<TaskSpec> {
        let mut bindings = BTreeMap::new();
        let mut styles = Vec::new();
        let mut seen: BTreeMap<(PathBuf, Option<PathBuf>), usize> = BTreeMap::new();
        for e in &self.labels {
            let binding = match (&e.style, e.preserve) {
                (Some(_), true) => {
                    return Err(Error::Config(format!("label {} is both preserved and stylised", e.label)));
                }
                (None, true) => Binding::Preserve,
                (None, false) => {
                    return Err(Error::Config(format!("label {} needs either preserve or style", e.label)));
                }
                (Some(style), false) => {
                    let key = (style.clone(), e.style_mask.clone());
                    let idx = match seen.get(&key) {
                        Some(&i) => i,
                        None => {
                            let image = read_png(&base.join(style))?;
                            let mask = match &e.style_mask {
                                Some(m) => read_mask_png(&base.join(m))?,
                                None => LabelMask::uniform(image.width, image.height, e.label),
                            };
                            let target = match &e.style_semantic {
                                Some(p) => {
                                    let sem = tensor_to_feature(&read_ctns(&base.join(p))?, FeatureSpace::Semantic)?;
                                    StyleTarget::with_semantic(image, mask, pipeline, sem)?
                                }
                                None => StyleTarget::new(image, mask, pipeline)?,
                            };
                            styles.push(target);
                            seen.insert(key, styles.len() - 1);
                            styles.len() - 1
                        }
                    };
                    Binding::Style(idx)
                }
            };
            if bindings.insert(e.label, binding).is_some() {
                return Err(Error::Config(format!("label {} is bound twice", e.label)));
            }
        }
        let task = TaskSpec {
            mode: self.mode,
            bindings,
            styles,
            loss: LossConfig {
                lambda: self.lambda,
                lambda_tv: self.lambda_tv,
                alpha: self.alpha,
            },
            optim: OptimConfig {
                step_size: self.step_size,
                steps: self.steps,
                views_per_step: self.views_per_step,
                seed: self.seed,
                ..OptimConfig::default()
            },
        };
        task.validate()?;
        Ok(task)
    }
}

/// Appends one JSON object per line.
pub fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ctns_layout() {
        let t = Tensor::new(vec![2], TensorData::U8(vec![7, 9])).unwrap();
        let b = t.encode();
        assert_eq!(&b[..4], b"CTNS");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 1);
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..16], &[7, 9]);
        assert_eq!(&b[16..], &crc32fast::hash(&[7, 9]).to_le_bytes());
    }

    #[test]
    fn ctns_rejects_corruption() {
        let t = Tensor::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut b = t.encode();
        let n = b.len();
        b[n - 6] ^= 1;
        assert!(matches!(Tensor::decode(&b), Err(Error::Format(m)) if m.contains("CRC")));
        let b = t.encode();
        assert!(Tensor::decode(&b[..b.len() - 1]).is_err());
        assert!(Tensor::decode(b"NOPE00000000000").is_err());
        assert!(Tensor::f32(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = VoxelGrid::new([3, 4, 5], [-1.0; 3], [1.0, 2.0, 3.0], 1).unwrap();
        g.set_voxel_color(7, [0.2, 0.5, 0.9]);
        g.set_voxel_density(7, 3.5).unwrap();
        g.freeze_density();
        save_grid(dir.path(), &g).unwrap();
        let h = load_grid(dir.path()).unwrap();
        assert_eq!(h.header(), g.header());
        assert_eq!(h.density(), g.density());
        assert_eq!(h.sh(), g.sh());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        write_png(&dir.path().join("a.png"), &img).unwrap();
        let back = read_png(&dir.path().join("a.png")).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        let m = LabelMask::new(3, 1, vec![0, 2, 1]).unwrap();
        write_mask_png(&dir.path().join("m.png"), &m).unwrap();
        assert_eq!(read_mask_png(&dir.path().join("m.png")).unwrap(), m);
        assert!(read_mask_png(&dir.path().join("a.png")).is_err());
    }

    #[test]
    fn camera_record_round_trip() {
        let c = Camera::look_at([1.0, 2.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 30.0, 16, 12, 0.1, 10.0).unwrap();
        let back = Camera::try_from(&CameraRecord::from(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn task_file_rejects_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = FeaturePipeline::default();
        let t = TaskFile {
            mode: TaskMode::Compositional,
            labels: vec![LabelEntry {
                label: 0,
                preserve: false,
                style: None,
                style_mask: None,
                style_semantic: None,
            }],
            alpha: 0.5,
            lambda: 1e-3,
            lambda_tv: 1.0,
            steps: 1,
            step_size: 0.01,
            views_per_step: None,
            seed: 0,
        };
        assert!(matches!(t.resolve(dir.path(), &pipeline), Err(Error::Config(_))));
        let parsed: TaskFile = serde_json::from_str(r#"{"mode":"object-select","labels":[{"label":0,"preserve":true}]}"#).unwrap();
        assert_eq!(parsed.lambda, 1e-3);
        assert_eq!(parsed.lambda_tv, 1.0);
        assert!(serde_json::from_str::<TaskFile>(r#"{"mode":"other","labels":[]}"#).is_err());
    }

    proptest! {
        #[test]
        fn ctns_round_trip(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>(), code in 0u8..3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let data = match code {
                0 => TensorData::F32((0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect()),
                1 => TensorData::U8((0..n).map(|_| rng.random()).collect()),
                _ => TensorData::I32((0..n).map(|_| rng.random()).collect()),
            };
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.encode(), t.encode());
        }
    }
}
