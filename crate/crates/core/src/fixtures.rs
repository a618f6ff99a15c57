//! Deterministic synthetic scenes and style images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::feat::FeaturePipeline;
use crate::grid::VoxelGrid;
use crate::image::{Image, LabelMask};
use crate::render::{render_view, Camera, RenderAux, RenderOptions};
use crate::stylize::{PretrainConfig, StyleTarget, View};

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= radius * radius,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Box { min, max } => (*min, *max),
            Shape::Sphere { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Solid,
    /// World-space checkerboard alternating with `alt`.
    Checker { alt: [f64; 3], cell: f64 },
    /// Seeded per-voxel jitter of the base colour.
    Noise { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f32,
    pub color: [f64; 3],
    pub pattern: Pattern,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CameraRig {
    /// `count` cameras on a horizontal circle around the y axis.
    Ring {
        count: usize,
        radius: f64,
        height: f64,
        target: [f64; 3],
        fov_deg: f64,
    },
    Explicit(Vec<Camera>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub sh_degree: usize,
    /// Later primitives overwrite earlier ones where they overlap.
    pub primitives: Vec<Primitive>,
    pub cameras: CameraRig,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of seeded Gaussian noise added to each ground-truth
    /// image (clamped to `[0, 1]`), independent per view.
    pub pixel_noise: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub grid: VoxelGrid,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<LabelMask>,
    /// Primitive label owning each lattice node, if any.
    pub voxel_labels: Vec<Option<u32>>,
}

impl Scene {
    pub fn views(&self) -> Result<Vec<View>> {
        self.cameras
            .iter()
            .zip(&self.images)
            .zip(&self.masks)
            .map(|((c, i), m)| View::new(c.clone(), i.clone(), m.clone()))
            .collect()
    }
}

fn focal_for(width: usize, fov_deg: f64) -> f64 {
    width as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.shape.bounds();
            if (0..3).any(|a| lo[a] < self.bbox_min[a] || hi[a] > self.bbox_max[a]) {
                return Err(Error::invalid("scene", format!("primitive {i} extends outside the bounding box")));
            }
        }
        let n = match &self.cameras {
            CameraRig::Ring { count, .. } => *count,
            CameraRig::Explicit(c) => c.len(),
        };
        if n < 2 {
            return Err(Error::invalid("scene", "at least two cameras are required"));
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        match &self.cameras {
            CameraRig::Explicit(c) => Ok(c.clone()),
            CameraRig::Ring {
                count,
                radius,
                height,
                target,
                fov_deg,
            } => (0..*count)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / *count as f64;
                    let eye = [radius * a.sin(), *height, -radius * a.cos()];
                    Camera::look_at(eye, *target, [0.0, 1.0, 0.0], focal_for(self.width, *fov_deg), self.width, self.height, 0.1, 20.0)
                })
                .collect(),
        }
    }
}

/// Voxelises the primitives, renders ground truth and derives masks from
/// per-label compositing weight (a pixel takes a label whose share of the
/// composited weight exceeds 0.5, otherwise 0).
pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut grid = VoxelGrid::new(spec.dims, spec.bbox_min, spec.bbox_max, spec.sh_degree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = grid.voxel_count();
    let mut voxel_labels = vec![None; n];
    for idx in 0..n {
        let [ix, iy, iz] = grid.coords(idx);
        let p = grid.node_position(ix, iy, iz);
        let Some(prim) = spec.primitives.iter().rev().find(|pr| pr.shape.contains(p)) else {
            continue;
        };
        let color = match &prim.pattern {
            Pattern::Solid => prim.color,
            Pattern::Checker { alt, cell } => {
                let parity: i64 = p.iter().map(|c| (c / cell).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    prim.color
                } else {
                    *alt
                }
            }
            Pattern::Noise { amplitude } => prim.color.map(|c| (c + amplitude * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)),
        };
        grid.set_voxel_density(idx, prim.density)?;
        grid.set_voxel_color(idx, color);
        voxel_labels[idx] = Some(prim.label);
    }
    let cameras = spec.cameras()?;
    let opts = RenderOptions::default();
    let mut images = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    let noise = Normal::new(0.0, spec.pixel_noise).map_err(|e| Error::invalid("pixel_noise", e.to_string()))?;
    for (i, cam) in cameras.iter().enumerate() {
        let (mut img, aux) = render_view(&grid, cam, &opts)?;
        masks.push(ownership_mask(&grid, &aux, &voxel_labels)?);
        if spec.pixel_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            img.data.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        images.push(img.with_id(format!("{i:03}")));
    }
    Ok(Scene {
        grid,
        cameras,
        images,
        masks,
        voxel_labels,
    })
}

/// Per-pixel composited weight carried by each label.
pub fn label_weights(grid: &VoxelGrid, aux: &RenderAux, voxel_labels: &[Option<u32>], pixel: usize) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64)> = Vec::new();
    for s in aux.pixel_samples(pixel) {
        let mut shares: Vec<(u32, f64)> = Vec::new();
        let mut total = 0.0;
        for (&i, &fw) in s.footprint.indices.iter().zip(&s.footprint.weights) {
            let d = fw * f64::from(grid.density()[i as usize]).max(0.0);
            if d == 0.0 {
                continue;
            }
            total += d;
            if let Some(l) = voxel_labels[i as usize] {
                match shares.iter_mut().find(|(k, _)| *k == l) {
                    Some(e) => e.1 += d,
                    None => shares.push((l, d)),
                }
            }
        }
        if total == 0.0 {
            continue;
        }
        for (l, d) in shares {
            let w = s.weight * d / total;
            match out.iter_mut().find(|(k, _)| *k == l) {
                Some(e) => e.1 += w,
                None => out.push((l, w)),
            }
        }
    }
    out
}

fn ownership_mask(grid: &VoxelGrid, aux: &RenderAux, voxel_labels: &[Option<u32>]) -> Result<LabelMask> {
    let labels = (0..aux.pixels.len())
        .map(|p| {
            label_weights(grid, aux, voxel_labels, p)
                .into_iter()
                .find(|&(_, w)| w > 0.5)
                .map_or(0, |(l, _)| l)
        })
        .collect();
    LabelMask::new(aux.width, aux.height, labels)
}

const FLOOR: [f64; 3] = [0.62, 0.55, 0.45];
const FLOOR_ALT: [f64; 3] = [0.35, 0.42, 0.5];

fn floor() -> Primitive {
    Primitive {
        shape: Shape::Box {
            min: [-0.95, -0.9, -0.95],
            max: [0.95, -0.55, 0.95],
        },
        density: 30.0,
        color: FLOOR,
        pattern: Pattern::Checker { alt: FLOOR_ALT, cell: 0.4 },
        label: 0,
    }
}

/// Sensor noise on the box and occlusion views, so a pretrained grid cannot
/// reproduce them exactly.
pub const FIXTURE_PIXEL_NOISE: f64 = 0.02;

/// Pretraining used for the fixtures: pixel loss plus the same harmonics
/// smoothness weight fine-tuning applies by default.
pub fn fixture_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        tv_weight: 1.0,
        ..PretrainConfig::default()
    }
}

/// A jittered box (label 1) floating above a checkered floor (label 0), seen
/// by a ring of six cameras.
pub fn box_scene_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        dims: [24, 24, 24],
        bbox_min: [-1.0; 3],
        bbox_max: [1.0; 3],
        sh_degree: 1,
        primitives: vec![
            floor(),
            Primitive {
                shape: Shape::Box {
                    min: [-0.35, -0.3, -0.35],
                    max: [0.35, 0.4, 0.35],
                },
                density: 30.0,
                color: [0.45, 0.6, 0.35],
                pattern: Pattern::Noise { amplitude: 0.1 },
                label: 1,
            },
        ],
        cameras: CameraRig::Ring {
            count: 6,
            radius: 3.0,
            height: 1.6,
            target: [0.0, -0.3, 0.0],
            fov_deg: 45.0,
        },
        width: 32,
        height: 32,
        pixel_noise: FIXTURE_PIXEL_NOISE,
    }
}

/// Floor (label 0), a box (label 1) and a sphere (label 2).
pub fn two_object_spec(seed: u64) -> SceneSpec {
    let mut spec = box_scene_spec(seed);
    spec.primitives[1].shape = Shape::Box {
        min: [-0.7, -0.55, -0.3],
        max: [-0.1, 0.05, 0.3],
    };
    spec.primitives.push(Primitive {
        shape: Shape::Sphere {
            center: [0.4, -0.25, 0.0],
            radius: 0.3,
        },
        density: 30.0,
        color: [0.75, 0.35, 0.3],
        pattern: Pattern::Noise { amplitude: 0.1 },
        label: 2,
    });
    spec
}

/// One opaque box in the middle of an otherwise empty grid, four cameras.
pub fn single_box_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        dims: [16, 16, 16],
        bbox_min: [-1.0; 3],
        bbox_max: [1.0; 3],
        sh_degree: 1,
        primitives: vec![Primitive {
            shape: Shape::Box {
                min: [-0.3; 3],
                max: [0.3; 3],
            },
            density: 50.0,
            color: [0.8, 0.3, 0.2],
            pattern: Pattern::Solid,
            label: 1,
        }],
        cameras: CameraRig::Ring {
            count: 4,
            radius: 3.0,
            height: 0.0,
            target: [0.0; 3],
            fov_deg: 40.0,
        },
        width: 24,
        height: 24,
        pixel_noise: 0.0,
    }
}

/// Occlusion fixture: a wall (label 0) behind a slab (label 1). Point A on
/// the wall is seen directly by two cameras and hidden behind the slab from
/// the other two.
#[derive(Clone, Debug)]
pub struct OcclusionScene {
    pub scene: Scene,
    pub point_a: [f64; 3],
    /// Per view: whether A is directly visible.
    pub visible: Vec<bool>,
}

pub const OCCLUSION_POINT_A: [f64; 3] = [0.4, 0.0, 0.62];
const OCCLUSION_CAMERA_X: [f64; 4] = [-1.2, -0.8, 1.2, 2.0];

pub fn occlusion_spec(with_slab: bool) -> Result<SceneSpec> {
    let focal = focal_for(32, 45.0);
    let cameras = OCCLUSION_CAMERA_X
        .iter()
        .map(|&x| Camera::look_at([x, 0.0, -3.0], [0.2, 0.0, 0.4], [0.0, 1.0, 0.0], focal, 32, 32, 0.1, 20.0))
        .collect::<Result<Vec<_>>>()?;
    let mut primitives = vec![Primitive {
        shape: Shape::Box {
            min: [-0.95, -0.95, 0.6],
            max: [0.95, 0.95, 0.9],
        },
        density: 40.0,
        color: [0.55, 0.5, 0.6],
        pattern: Pattern::Checker {
            alt: [0.7, 0.62, 0.4],
            cell: 0.3,
        },
        label: 0,
    }];
    if with_slab {
        primitives.push(Primitive {
            shape: Shape::Box {
                min: [-0.2, -0.5, -0.3],
                max: [0.25, 0.5, 0.1],
            },
            density: 40.0,
            color: [0.3, 0.45, 0.7],
            pattern: Pattern::Noise { amplitude: 0.08 },
            label: 1,
        });
    }
    Ok(SceneSpec {
        seed: 3,
        dims: [24, 24, 24],
        bbox_min: [-1.0; 3],
        bbox_max: [1.0; 3],
        sh_degree: 1,
        primitives,
        cameras: CameraRig::Explicit(cameras),
        width: 32,
        height: 32,
        pixel_noise: FIXTURE_PIXEL_NOISE,
    })
}

pub fn build_occlusion_scene_with(with_slab: bool) -> Result<OcclusionScene> {
    let scene = build_scene(&occlusion_spec(with_slab)?)?;
    let visible = OCCLUSION_CAMERA_X.iter().map(|&x| !with_slab || x > 0.0).collect();
    Ok(OcclusionScene {
        scene,
        point_a: OCCLUSION_POINT_A,
        visible,
    })
}

pub fn build_occlusion_scene() -> Result<OcclusionScene> {
    build_occlusion_scene_with(true)
}

/// Rendering weight the lattice node nearest `point` receives in each view.
pub fn point_weights(grid: &VoxelGrid, cameras: &[Camera], point: [f64; 3]) -> Result<Vec<f64>> {
    let voxel = grid.nearest_node(point)?;
    cameras
        .iter()
        .map(|c| {
            let (_, aux) = render_view(grid, c, &RenderOptions::default())?;
            Ok((0..aux.pixels.len()).map(|p| aux.voxel_weight_in_pixel(p, voxel)).sum())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleKind {
    /// Diagonal two-colour stripes; mask labels alternate per stripe.
    Stripes,
    /// Dots on a plain ground; dots carry label 1.
    Dots,
    /// Left half label 0 with stripes, right half label 1 with dots.
    TwoRegion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleFixture {
    pub image: Image,
    pub mask: LabelMask,
}

impl StyleFixture {
    pub fn target(&self, pipeline: &FeaturePipeline) -> Result<StyleTarget> {
        StyleTarget::new(self.image.clone(), self.mask.clone(), pipeline)
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

pub fn build_style_image(kind: StyleKind, seed: u64, size: usize) -> StyleFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, c) = (random_color(&mut rng), random_color(&mut rng));
    let (b, d) = (a.map(|v| 1.0 - v), c.map(|v| 1.0 - v));
    let period = rng.random_range(4.0..8.0);
    let spacing = rng.random_range(5.0..8.0);
    let radius = spacing * rng.random_range(0.25..0.4);
    let phase: (f64, f64) = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
    let stripe = |x: f64, y: f64| ((x + y) / period).floor().rem_euclid(2.0) as u32;
    let dot = |x: f64, y: f64| {
        let dx = (x + phase.0).rem_euclid(spacing) - spacing / 2.0;
        let dy = (y + phase.1).rem_euclid(spacing) - spacing / 2.0;
        u32::from(dx * dx + dy * dy <= radius * radius)
    };
    let mut image = Image::zeros(size, size);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (rgb, label) = match kind {
                StyleKind::Stripes => {
                    let s = stripe(fx, fy);
                    (if s == 0 { a } else { b }, s)
                }
                StyleKind::Dots => {
                    let s = dot(fx, fy);
                    (if s == 0 { c } else { d }, s)
                }
                StyleKind::TwoRegion => {
                    if x < size / 2 {
                        (if stripe(fx, fy) == 0 { a } else { b }, 0)
                    } else {
                        (if dot(fx, fy) == 0 { c } else { d }, 1)
                    }
                }
            };
            image.set_pixel(x, y, rgb);
            labels.push(label);
        }
    }
    let mask = LabelMask::new(size, size, labels).expect("dimensions match by construction");
    StyleFixture {
        image: image.with_id(format!("style-{kind:?}-{seed}").to_lowercase()),
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::cosine_distance;

    #[test]
    fn empty_scene_renders_background() {
        let mut spec = single_box_spec(0);
        spec.primitives.clear();
        let s = build_scene(&spec).unwrap();
        for (img, m) in s.images.iter().zip(&s.masks) {
            assert!(img.data.iter().all(|&v| v == 0.0));
            assert!(m.labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn centred_box_is_centred() {
        let s = build_scene(&single_box_spec(0)).unwrap();
        assert_eq!(s.cameras.len(), 4);
        for m in &s.masks {
            assert!(m.count(1) > 0);
            assert_eq!(m.get(m.width / 2, m.height / 2), 1);
            assert_eq!(m.get(0, 0), 0);
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = build_scene(&box_scene_spec(4)).unwrap();
        let b = build_scene(&box_scene_spec(4)).unwrap();
        assert_eq!(a.grid.sh_hash(), b.grid.sh_hash());
        assert_eq!(a.images, b.images);
        assert_eq!(a.masks, b.masks);
        let c = build_scene(&box_scene_spec(5)).unwrap();
        assert_ne!(a.grid.sh_hash(), c.grid.sh_hash());
    }

    #[test]
    fn primitives_outside_bbox_rejected() {
        let mut spec = single_box_spec(0);
        spec.primitives[0].shape = Shape::Sphere {
            center: [0.9, 0.0, 0.0],
            radius: 0.2,
        };
        assert!(build_scene(&spec).is_err());
        let mut spec = single_box_spec(0);
        spec.cameras = CameraRig::Ring {
            count: 1,
            radius: 3.0,
            height: 0.0,
            target: [0.0; 3],
            fov_deg: 40.0,
        };
        assert!(build_scene(&spec).is_err());
    }

    #[test]
    fn masks_follow_composited_ownership() {
        let spec = box_scene_spec(1);
        let s = build_scene(&spec).unwrap();
        let (_, aux) = render_view(&s.grid, &s.cameras[0], &RenderOptions::default()).unwrap();
        for p in 0..aux.pixels.len() {
            let w1: f64 = label_weights(&s.grid, &aux, &s.voxel_labels, p)
                .iter()
                .filter(|(l, _)| *l == 1)
                .map(|(_, w)| w)
                .sum();
            assert_eq!(s.masks[0].labels[p] == 1, w1 > 0.5, "pixel {p}");
        }
        assert!(s.masks.iter().all(|m| m.count(1) > 20 && m.count(0) > 20));
    }

    #[test]
    fn occlusion_point_a() {
        let occ = build_occlusion_scene().unwrap();
        let w = point_weights(&occ.scene.grid, &occ.scene.cameras, occ.point_a).unwrap();
        let min_open = w[2].min(w[3]);
        let max_hidden = w[0].max(w[1]);
        assert!(min_open > 0.0 && min_open >= 10.0 * max_hidden, "{w:?}");
        for (v, cam) in occ.scene.cameras.iter().enumerate() {
            let [px, py] = cam.project(occ.point_a).unwrap();
            let label = occ.scene.masks[v].get(px as usize, py as usize);
            assert_eq!(label, if occ.visible[v] { 0 } else { 1 }, "view {v}");
        }
        let open = build_occlusion_scene_with(false).unwrap();
        assert!(open.visible.iter().all(|&v| v));
        let w = point_weights(&open.scene.grid, &open.scene.cameras, open.point_a).unwrap();
        let max = w.iter().cloned().fold(0.0, f64::max);
        assert!(w.iter().all(|&x| x > 0.1 * max), "{w:?}");
    }

    #[test]
    fn style_images() {
        let two = build_style_image(StyleKind::TwoRegion, 3, 32);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(two.mask.get(x, y), u32::from(x >= 16));
            }
        }
        assert_eq!(build_style_image(StyleKind::Dots, 9, 32), build_style_image(StyleKind::Dots, 9, 32));
        assert_ne!(build_style_image(StyleKind::Dots, 9, 32).image, build_style_image(StyleKind::Dots, 10, 32).image);
    }

    #[test]
    fn dots_and_stripes_differ_in_texture_space() {
        let pipeline = FeaturePipeline::default();
        for seed in 0..8 {
            let s = pipeline.texture.extract(&build_style_image(StyleKind::Stripes, seed, 32).image).unwrap();
            let d = pipeline.texture.extract(&build_style_image(StyleKind::Dots, seed, 32).image).unwrap();
            let mut total = 0.0;
            let mut n = 0.0;
            for i in 0..s.pixel_count() {
                for j in 0..d.pixel_count() {
                    if let Ok(c) = cosine_distance(s.vector(i), d.vector(j)) {
                        total += c;
                        n += 1.0;
                    }
                }
            }
            assert!(total / n > 0.1, "seed {seed}: {}", total / n);
        }
    }
}
