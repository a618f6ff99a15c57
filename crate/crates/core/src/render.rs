//! Differentiable ray-marching volume renderer.
//!
//! Forward: uniform samples along each pixel ray, composited front to back with
//! `w_i = T_i (1 - exp(-σ_i δ_i))`, `T_i = exp(-Σ_{j<i} σ_j δ_j)` and the
//! remaining transmittance spent on a background colour. The composited colour
//! is clamped to `[0, 1]` once per pixel.
//!
//! Backward: the colour of sample `i` receives exactly `w_i` times the pixel
//! gradient, chained through the (linear) harmonics basis and the trilinear
//! footprint. A density gradient is available for photometric pretraining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{activate_density, basis_count, sh_basis, Footprint, SamplePoint, VoxelGrid};
use crate::image::Image;
use crate::par;

/// Rays stop once transmittance falls below this value.
pub const TERMINATION_TRANSMITTANCE: f64 = 1e-4;

/// Pinhole camera. `rotation` maps camera-frame vectors to world vectors
/// (columns are the camera x-right, y-down and z-forward axes); `translation`
/// is the camera centre in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll (image y points
    /// away from it).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let z = normalize(sub(target, eye));
        let x = cross(z, up);
        if dot(x, x) < 1e-12 {
            return Err(Error::invalid("camera", "up vector is parallel to the view direction"));
        }
        let x = normalize(x);
        let y = cross(z, x);
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        let cam = Self {
            rotation,
            translation: eye,
            focal,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr - expect).abs() > 1e-6 {
                    return Err(Error::invalid("camera", "rotation is not orthonormal"));
                }
            }
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera", "need 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "width and height must be >= 1"));
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid("camera", "focal must be positive"));
        }
        Ok(())
    }

    /// Unit world-space direction through the centre of pixel `(x, y)`.
    pub fn ray_direction(&self, x: usize, y: usize) -> [f64; 3] {
        let c = [
            (x as f64 + 0.5 - self.width as f64 / 2.0) / self.focal,
            (y as f64 + 0.5 - self.height as f64 / 2.0) / self.focal,
            1.0,
        ];
        let r = &self.rotation;
        normalize([
            r[0][0] * c[0] + r[0][1] * c[1] + r[0][2] * c[2],
            r[1][0] * c[0] + r[1][1] * c[1] + r[1][2] * c[2],
            r[2][0] * c[0] + r[2][1] * c[1] + r[2][2] * c[2],
        ])
    }

    /// Projects a world point to continuous pixel coordinates, if in front.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let d = sub(p, self.translation);
        let r = &self.rotation;
        let c: [f64; 3] = std::array::from_fn(|j| (0..3).map(|k| r[k][j] * d[k]).sum());
        if c[2] <= 0.0 {
            return None;
        }
        Some([
            c[0] / c[2] * self.focal + self.width as f64 / 2.0,
            c[1] / c[2] * self.focal + self.height as f64 / 2.0,
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Marching step; `None` uses half the smallest voxel spacing.
    pub step: Option<f64>,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            step: None,
            background: [0.0; 3],
        }
    }
}

impl RenderOptions {
    pub fn step_for(&self, grid: &VoxelGrid) -> f64 {
        self.step.unwrap_or_else(|| {
            let s = grid.spacing();
            0.5 * s[0].min(s[1]).min(s[2])
        })
    }
}

/// Parametric interval `[t0, t1]` where the ray is inside the grid box.
fn clip_to_box(grid: &VoxelGrid, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let lo = grid.bbox_min();
    let hi = grid.bbox_max();
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (ta, tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 > t0).then_some((t0, t1))
}

/// Sample depths `t0 + δ/2 + kδ < t1` along the ray, restricted to `[near, far]`.
fn sample_depths(
    grid: &VoxelGrid,
    origin: [f64; 3],
    dir: [f64; 3],
    step: f64,
    near: f64,
    far: f64,
) -> impl Iterator<Item = f64> {
    let (start, end) = match clip_to_box(grid, origin, dir) {
        Some((t0, t1)) => (t0.max(near), t1.min(far)),
        None => (0.0, 0.0),
    };
    (0..)
        .map(move |k| start + step * (0.5 + k as f64))
        .take_while(move |&t| t < end)
}

fn clamp_to_box(grid: &VoxelGrid, p: [f64; 3]) -> [f64; 3] {
    let lo = grid.bbox_min();
    let hi = grid.bbox_max();
    std::array::from_fn(|a| p[a].clamp(lo[a], hi[a]))
}

/// Uniform samples inside the grid box along a ray starting at `origin`.
///
/// The first sample sits `δ/2` past the box entry (or past the origin when the
/// origin is inside the box); a ray that misses yields no samples.
pub fn march_ray(grid: &VoxelGrid, origin: [f64; 3], direction: [f64; 3], step: f64) -> Vec<SamplePoint> {
    assert!(step > 0.0, "step must be positive");
    sample_depths(grid, origin, direction, step, 0.0, f64::INFINITY)
        .map(|t| SamplePoint {
            position: clamp_to_box(
                grid,
                [
                    origin[0] + t * direction[0],
                    origin[1] + t * direction[1],
                    origin[2] + t * direction[2],
                ],
            ),
            direction,
            step,
        })
        .collect()
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_i` for each sample (transmittance before the sample).
    pub transmittances: Vec<f64>,
    /// Transmittance left after the last sample; the background weight.
    pub residual: f64,
}

/// Front-to-back alpha compositing over a background colour.
pub fn composite(sigmas: &[f64], rgbs: &[[f64; 3]], deltas: &[f64], background: [f64; 3]) -> Result<Composite> {
    if sigmas.len() != rgbs.len() || sigmas.len() != deltas.len() {
        return Err(Error::Dimension("composite inputs differ in length".into()));
    }
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittances = Vec::with_capacity(sigmas.len());
    let mut rgb = [0.0; 3];
    let mut t = 1.0f64;
    for ((&sigma, c), &delta) in sigmas.iter().zip(rgbs).zip(deltas) {
        if sigma < 0.0 {
            return Err(Error::Contract(format!("negative density {sigma}")));
        }
        if !(delta > 0.0) {
            return Err(Error::Contract(format!("non-positive step {delta}")));
        }
        let next = t * (-sigma * delta).exp();
        let w = t - next;
        transmittances.push(t);
        weights.push(w);
        for ch in 0..3 {
            rgb[ch] += w * c[ch];
        }
        t = next;
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    Ok(Composite {
        rgb,
        weights,
        transmittances,
        residual: t,
    })
}

/// One retained sample along a pixel ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub footprint: Footprint,
    pub weight: f64,
    pub transmittance: f64,
    pub sigma: f64,
    pub step: f64,
    /// Pre-clamp sample radiance.
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelRecord {
    pub direction: [f64; 3],
    pub range: std::ops::Range<usize>,
    pub residual: f64,
}

/// Everything the backward passes need, captured during `render_view`.
///
/// Only samples with non-zero density are kept: the rest carry zero weight and
/// zero density gradient (ReLU is flat below zero).
#[derive(Clone, Debug)]
pub struct RenderAux {
    pub width: usize,
    pub height: usize,
    pub grid_version: u64,
    pub background: [f64; 3],
    pub pixels: Vec<PixelRecord>,
    pub samples: Vec<SampleRecord>,
    /// Composited image before clamping.
    pub pre_clamp: Image,
}

impl RenderAux {
    pub fn pixel_samples(&self, pixel: usize) -> &[SampleRecord] {
        &self.samples[self.pixels[pixel].range.clone()]
    }

    /// Sum of rendering weight the lattice node `voxel` receives in `pixel`.
    pub fn voxel_weight_in_pixel(&self, pixel: usize, voxel: usize) -> f64 {
        self.pixel_samples(pixel)
            .iter()
            .map(|s| {
                s.footprint
                    .indices
                    .iter()
                    .zip(&s.footprint.weights)
                    .filter(|(&i, _)| i as usize == voxel)
                    .map(|(_, &fw)| fw * s.weight)
                    .sum::<f64>()
            })
            .sum()
    }
}

struct PixelOut {
    rgb: [f64; 3],
    direction: [f64; 3],
    residual: f64,
    samples: Vec<SampleRecord>,
}

fn render_pixel(grid: &VoxelGrid, camera: &Camera, step: f64, background: [f64; 3], x: usize, y: usize) -> PixelOut {
    let dir = camera.ray_direction(x, y);
    let origin = camera.translation;
    let degree = grid.sh_degree();
    let b = basis_count(degree);
    let basis = sh_basis(degree, dir);
    let mut coeffs = [0.0f64; 27];
    let mut samples = Vec::new();
    let mut rgb = [0.0; 3];
    let mut t = 1.0f64;
    for depth in sample_depths(grid, origin, dir, step, camera.near, camera.far) {
        let p = clamp_to_box(
            grid,
            [
                origin[0] + depth * dir[0],
                origin[1] + depth * dir[1],
                origin[2] + depth * dir[2],
            ],
        );
        let fp = grid.footprint(p).expect("clamped sample lies inside the grid");
        let sigma = activate_density(grid.density_at(&fp));
        if sigma == 0.0 {
            continue;
        }
        grid.sh_at(&fp, &mut coeffs);
        let mut c = [0.0; 3];
        for (ch, out) in c.iter_mut().enumerate() {
            *out = (0..b).map(|k| coeffs[ch * b + k] * basis[k]).sum();
        }
        let next = t * (-sigma * step).exp();
        let w = t - next;
        for ch in 0..3 {
            rgb[ch] += w * c[ch];
        }
        samples.push(SampleRecord {
            footprint: fp,
            weight: w,
            transmittance: t,
            sigma,
            step,
            rgb: c,
        });
        t = next;
        if t < TERMINATION_TRANSMITTANCE {
            break;
        }
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    PixelOut {
        rgb,
        direction: dir,
        residual: t,
        samples,
    }
}

/// Renders every pixel of `camera`; returns the clamped image and the aux record.
pub fn render_view(grid: &VoxelGrid, camera: &Camera, opts: &RenderOptions) -> Result<(Image, RenderAux)> {
    camera.validate()?;
    let step = opts.step_for(grid);
    if !(step > 0.0) {
        return Err(Error::invalid("render options", "step must be positive"));
    }
    let (w, h) = (camera.width, camera.height);
    let outs = par::map_range(w * h, |p| render_pixel(grid, camera, step, opts.background, p % w, p / w));

    let mut pre = Image::zeros(w, h);
    let mut pixels = Vec::with_capacity(w * h);
    let mut samples = Vec::with_capacity(outs.iter().map(|o| o.samples.len()).sum());
    for (p, o) in outs.into_iter().enumerate() {
        pre.data[p * 3..p * 3 + 3].copy_from_slice(&o.rgb);
        let start = samples.len();
        samples.extend(o.samples);
        pixels.push(PixelRecord {
            direction: o.direction,
            range: start..samples.len(),
            residual: o.residual,
        });
    }
    let mut image = pre.clone();
    image.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((
        image,
        RenderAux {
            width: w,
            height: h,
            grid_version: grid.version(),
            background: opts.background,
            pixels,
            samples,
            pre_clamp: pre,
        },
    ))
}

/// Gradient of the clamp at a pre-clamp value.
#[inline]
fn clamp_pass(v: f64) -> f64 {
    if (0.0..=1.0).contains(&v) {
        1.0
    } else {
        0.0
    }
}

fn check_inputs(grid: &VoxelGrid, aux: &RenderAux, pixel_grad: &Image) -> Result<()> {
    if aux.grid_version != grid.version() {
        return Err(Error::StaleAux {
            aux: aux.grid_version,
            grid: grid.version(),
        });
    }
    if pixel_grad.width != aux.width || pixel_grad.height != aux.height {
        return Err(Error::Dimension(format!(
            "pixel gradient is {}x{}, render is {}x{}",
            pixel_grad.width, pixel_grad.height, aux.width, aux.height
        )));
    }
    Ok(())
}

/// Dense buffers are accumulated per fixed pixel chunk and summed in chunk
/// order, so the result does not depend on the thread count.
/// Pixel chunks per backward pass. Fixed so the summation order, and hence
/// the result, does not depend on the thread count.
const BACKWARD_CHUNKS: usize = 16;

/// Per-chunk accumulator touching only the voxels its pixels reach.
struct SparseAcc {
    stride: usize,
    slot_of: Vec<u32>,
    voxels: Vec<u32>,
    values: Vec<f64>,
}

impl SparseAcc {
    fn new(voxels: usize, stride: usize) -> Self {
        Self {
            stride,
            slot_of: vec![u32::MAX; voxels],
            voxels: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    fn slot(&mut self, voxel: usize) -> &mut [f64] {
        let mut s = self.slot_of[voxel];
        if s == u32::MAX {
            s = self.voxels.len() as u32;
            self.slot_of[voxel] = s;
            self.voxels.push(voxel as u32);
            self.values.resize(self.values.len() + self.stride, 0.0);
        }
        let start = s as usize * self.stride;
        &mut self.values[start..start + self.stride]
    }
}

fn accumulate_chunked<F>(pixels: usize, voxels: usize, stride: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut SparseAcc) + Sync + Send,
{
    let chunks = par::fixed_chunks(pixels, BACKWARD_CHUNKS);
    let partials = par::map_slice(&chunks, |range| {
        let mut acc = SparseAcc::new(voxels, stride);
        for p in range.clone() {
            f(p, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; voxels * stride];
    for part in partials {
        for (i, &v) in part.voxels.iter().enumerate() {
            let dst = &mut total[v as usize * stride..(v as usize + 1) * stride];
            for (t, x) in dst.iter_mut().zip(&part.values[i * stride..(i + 1) * stride]) {
                *t += x;
            }
        }
    }
    total
}

/// Pixel gradient after the clamp, per channel.
#[inline]
fn effective_pixel_grad(aux: &RenderAux, pixel_grad: &Image, p: usize) -> [f64; 3] {
    std::array::from_fn(|ch| pixel_grad.data[p * 3 + ch] * clamp_pass(aux.pre_clamp.data[p * 3 + ch]))
}

/// Gradient of a pixel-space loss with respect to every harmonics coefficient.
///
/// The output has the layout of `grid.sh()`. Density receives nothing here.
pub fn backward_radiance(grid: &VoxelGrid, aux: &RenderAux, pixel_grad: &Image) -> Result<Vec<f64>> {
    check_inputs(grid, aux, pixel_grad)?;
    let degree = grid.sh_degree();
    let b = basis_count(degree);
    let k = 3 * b;
    Ok(accumulate_chunked(aux.pixels.len(), grid.voxel_count(), k, |p, acc| {
        let g = effective_pixel_grad(aux, pixel_grad, p);
        if g == [0.0; 3] {
            return;
        }
        let basis = sh_basis(degree, aux.pixels[p].direction);
        for s in aux.pixel_samples(p) {
            // d pixel / d c_i = w_i
            let gc = [s.weight * g[0], s.weight * g[1], s.weight * g[2]];
            for (&vi, &fw) in s.footprint.indices.iter().zip(&s.footprint.weights) {
                if fw == 0.0 {
                    continue;
                }
                let slot = acc.slot(vi as usize);
                for ch in 0..3 {
                    let scale = fw * gc[ch];
                    for bi in 0..b {
                        slot[ch * b + bi] += scale * basis[bi];
                    }
                }
            }
        }
    }))
}

/// Gradient of a pixel-space loss with respect to raw voxel densities.
pub fn backward_density(grid: &VoxelGrid, aux: &RenderAux, pixel_grad: &Image) -> Result<Vec<f64>> {
    check_inputs(grid, aux, pixel_grad)?;
    Ok(accumulate_chunked(aux.pixels.len(), grid.voxel_count(), 1, |p, acc| {
        let g = effective_pixel_grad(aux, pixel_grad, p);
        if g == [0.0; 3] {
            return;
        }
        let samples = aux.pixel_samples(p);
        let bg = aux.background;
        let residual = aux.pixels[p].residual;
        // dC/dσ_i = δ_i (T_{i+1} c_i − Σ_{j>i} w_j c_j − T_end·bg)
        let mut tail = [residual * bg[0], residual * bg[1], residual * bg[2]];
        for s in samples.iter().rev() {
            let t_next = s.transmittance - s.weight;
            let mut d = 0.0;
            for ch in 0..3 {
                d += g[ch] * s.step * (t_next * s.rgb[ch] - tail[ch]);
                tail[ch] += s.weight * s.rgb[ch];
            }
            // ReLU passes: retained samples have σ > 0
            for (&vi, &fw) in s.footprint.indices.iter().zip(&s.footprint.weights) {
                acc.slot(vi as usize)[0] += fw * d;
            }
        }
    }))
}
