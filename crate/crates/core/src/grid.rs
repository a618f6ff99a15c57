//! Dense voxel radiance field.
//!
//! Voxels sit on the lattice nodes of the bounding box: node `(i, j, k)` is at
//! `bbox_min + (i, j, k) * spacing` with `spacing = extent / (dims - 1)`, so the
//! two outermost node planes lie exactly on the box faces. Each node stores a
//! raw density (activated with ReLU) and `3 × B` spherical-harmonics
//! coefficients laid out channel-major (`[r_0..r_B, g_0..g_B, b_0..b_B]`).

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Largest supported harmonics degree.
pub const MAX_SH_DEGREE: usize = 2;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Number of basis functions for a harmonics degree.
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real spherical-harmonics basis values `Y_b(dir)` for `b < basis_count(degree)`.
pub fn sh_basis(degree: usize, dir: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = dir;
    let mut out = [0.0; 9];
    out[0] = SH_C0;
    if degree >= 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (x * x - y * y);
    }
    out
}

/// View-dependent radiance from one voxel's (or an interpolated) coefficient block.
///
/// The result is not clamped; clamping happens once after compositing.
pub fn eval_radiance(sh: &[f64], degree: usize, dir: [f64; 3]) -> Result<[f64; 3]> {
    let b = basis_count(degree);
    if sh.len() != 3 * b {
        return Err(Error::Dimension(format!(
            "expected {} coefficients for degree {degree}, got {}",
            3 * b,
            sh.len()
        )));
    }
    let basis = sh_basis(degree, dir);
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        *out = sh[ch * b..(ch + 1) * b]
            .iter()
            .zip(&basis)
            .map(|(c, y)| c * y)
            .sum();
    }
    Ok(rgb)
}

#[inline]
pub fn activate_density(raw: f64) -> f64 {
    raw.max(0.0)
}

/// The eight lattice nodes around a point and their trilinear weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub indices: [u32; 8],
    pub weights: [f64; 8],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub position: [f64; 3],
    pub direction: [f64; 3],
    pub step: f64,
}

/// JSON-serialisable grid header (everything except the arrays).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub dims: [usize; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub sh_degree: usize,
    pub frozen_density: bool,
}

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    dims: [usize; 3],
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    sh_degree: usize,
    density: Vec<f32>,
    sh: Vec<f32>,
    frozen_density: bool,
    version: u64,
}

impl VoxelGrid {
    /// Creates a grid with zero density and zero radiance.
    pub fn new(
        dims: [usize; 3],
        bbox_min: [f64; 3],
        bbox_max: [f64; 3],
        sh_degree: usize,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid("grid", format!("dims {dims:?} must all be >= 2")));
        }
        if (0..3).any(|a| !(bbox_max[a] > bbox_min[a])) {
            return Err(Error::invalid(
                "grid",
                format!("bbox_max {bbox_max:?} must exceed bbox_min {bbox_min:?}"),
            ));
        }
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::invalid(
                "grid",
                format!("sh degree {sh_degree} exceeds {MAX_SH_DEGREE}"),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            dims,
            bbox_min,
            bbox_max,
            sh_degree,
            density: vec![0.0; n],
            sh: vec![0.0; n * 3 * basis_count(sh_degree)],
            frozen_density: false,
            version: fresh_version(),
        })
    }

    pub fn from_parts(header: GridHeader, density: Vec<f32>, sh: Vec<f32>) -> Result<Self> {
        let mut g = Self::new(header.dims, header.bbox_min, header.bbox_max, header.sh_degree)?;
        if density.len() != g.density.len() || sh.len() != g.sh.len() {
            return Err(Error::Dimension(format!(
                "grid arrays have {} / {} entries, expected {} / {}",
                density.len(),
                sh.len(),
                g.density.len(),
                g.sh.len()
            )));
        }
        g.density = density;
        g.sh = sh;
        g.frozen_density = header.frozen_density;
        Ok(g)
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            dims: self.dims,
            bbox_min: self.bbox_min,
            bbox_max: self.bbox_max,
            sh_degree: self.sh_degree,
            frozen_density: self.frozen_density,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn bbox_min(&self) -> [f64; 3] {
        self.bbox_min
    }
    pub fn bbox_max(&self) -> [f64; 3] {
        self.bbox_max
    }
    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }
    pub fn basis_count(&self) -> usize {
        basis_count(self.sh_degree)
    }
    /// Coefficients per voxel (`3 × B`).
    pub fn coeffs_per_voxel(&self) -> usize {
        3 * self.basis_count()
    }
    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }
    pub fn version(&self) -> u64 {
        self.version
    }
    pub fn is_density_frozen(&self) -> bool {
        self.frozen_density
    }
    pub fn freeze_density(&mut self) {
        self.frozen_density = true;
    }
    pub fn unfreeze_density(&mut self) {
        self.frozen_density = false;
    }

    pub fn spacing(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.bbox_max[a] - self.bbox_min[a]) / (self.dims[a] - 1) as f64)
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let s = self.spacing();
        let i = [ix, iy, iz];
        std::array::from_fn(|a| self.bbox_min[a] + i[a] as f64 * s[a])
    }

    /// Lattice node closest to `p` (which must be inside the box).
    pub fn nearest_node(&self, p: [f64; 3]) -> Result<usize> {
        self.check_inside(p)?;
        let s = self.spacing();
        let i: [usize; 3] = std::array::from_fn(|a| {
            let u = ((p[a] - self.bbox_min[a]) / s[a]).round();
            (u.max(0.0) as usize).min(self.dims[a] - 1)
        });
        Ok(self.index(i[0], i[1], i[2]))
    }

    pub fn density(&self) -> &[f32] {
        &self.density
    }
    pub fn sh(&self) -> &[f32] {
        &self.sh
    }

    /// Mutable density access; fails while the density is frozen.
    pub fn density_mut(&mut self) -> Result<&mut [f32]> {
        if self.frozen_density {
            return Err(Error::Contract("density is frozen".into()));
        }
        self.version = fresh_version();
        Ok(&mut self.density)
    }

    pub fn sh_mut(&mut self) -> &mut [f32] {
        self.version = fresh_version();
        &mut self.sh
    }

    pub fn voxel_sh(&self, index: usize) -> &[f32] {
        let k = self.coeffs_per_voxel();
        &self.sh[index * k..(index + 1) * k]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.check_inside(p).is_ok()
    }

    fn check_inside(&self, p: [f64; 3]) -> Result<()> {
        for a in 0..3 {
            let tol = 1e-9 * (self.bbox_max[a] - self.bbox_min[a]);
            if !(p[a] >= self.bbox_min[a] - tol && p[a] <= self.bbox_max[a] + tol) {
                return Err(Error::OutOfBounds(p));
            }
        }
        Ok(())
    }

    /// Trilinear footprint of a point inside the box.
    pub fn footprint(&self, p: [f64; 3]) -> Result<Footprint> {
        self.check_inside(p)?;
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = (p[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a])
                * (n - 1) as f64;
            let u = u.clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            t[a] = u - i0 as f64;
        }
        let mut indices = [0u32; 8];
        let mut weights = [0.0f64; 8];
        for corner in 0..8 {
            let dx = corner & 1;
            let dy = (corner >> 1) & 1;
            let dz = (corner >> 2) & 1;
            let wx = if dx == 1 { t[0] } else { 1.0 - t[0] };
            let wy = if dy == 1 { t[1] } else { 1.0 - t[1] };
            let wz = if dz == 1 { t[2] } else { 1.0 - t[2] };
            indices[corner] = self.index(base[0] + dx, base[1] + dy, base[2] + dz) as u32;
            weights[corner] = wx * wy * wz;
        }
        Ok(Footprint { indices, weights })
    }

    pub fn density_at(&self, fp: &Footprint) -> f64 {
        fp.indices
            .iter()
            .zip(&fp.weights)
            .map(|(&i, &w)| w * self.density[i as usize] as f64)
            .sum()
    }

    /// Interpolated coefficient block (`3 × B`) written into `out`.
    pub fn sh_at(&self, fp: &Footprint, out: &mut [f64]) {
        let k = self.coeffs_per_voxel();
        out[..k].iter_mut().for_each(|v| *v = 0.0);
        for (&i, &w) in fp.indices.iter().zip(&fp.weights) {
            if w == 0.0 {
                continue;
            }
            let src = self.voxel_sh(i as usize);
            for (o, &s) in out[..k].iter_mut().zip(src) {
                *o += w * s as f64;
            }
        }
    }

    /// Trilinearly interpolated raw density and coefficient block at `p`.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> Result<(f64, Vec<f64>)> {
        let fp = self.footprint(p)?;
        let mut sh = vec![0.0; self.coeffs_per_voxel()];
        self.sh_at(&fp, &mut sh);
        Ok((self.density_at(&fp), sh))
    }

    /// Sets one voxel's coefficients from a constant (view-independent) colour.
    ///
    /// The DC coefficient is chosen so that `eval_radiance` returns `rgb`.
    pub fn set_voxel_color(&mut self, index: usize, rgb: [f64; 3]) {
        let b = self.basis_count();
        let k = 3 * b;
        let block = &mut self.sh[index * k..(index + 1) * k];
        block.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..3 {
            block[ch * b] = (rgb[ch] / SH_C0) as f32;
        }
        self.version = fresh_version();
    }

    pub fn set_voxel_density(&mut self, index: usize, raw: f32) -> Result<()> {
        self.density_mut()?[index] = raw;
        Ok(())
    }

    /// Stable 64-bit fingerprint of the density array.
    pub fn density_hash(&self) -> u64 {
        fnv1a(self.density.iter().flat_map(|v| v.to_le_bytes()))
    }

    pub fn sh_hash(&self) -> u64 {
        fnv1a(self.sh.iter().flat_map(|v| v.to_le_bytes()))
    }
}

pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
