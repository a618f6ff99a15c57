//! Optimisation driver: photometric pretraining, colour transfer on the
//! ground-truth images, and masked multi-view fine-tuning of radiance.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feat::{downsample_mask, resample_bilinear, FeatureMap, FeaturePipeline};
use crate::grid::{basis_count, fnv1a, sh_basis, VoxelGrid};
use crate::image::{Image, LabelMask};
use crate::loss::{tv_loss, view_loss, LossConfig, LossReport};
use crate::par;
use crate::render::{backward_density, backward_radiance, render_view, Camera, RenderAux, RenderOptions};

/// One training viewpoint.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub gt_image: Image,
    pub mask: LabelMask,
    /// Texture features of `gt_image`, filled by [`View::cache_content_features`].
    pub content_features: Option<FeatureMap>,
    content_key: Option<u64>,
}

fn image_key(image: &Image) -> u64 {
    fnv1a(image.data.iter().flat_map(|v| v.to_le_bytes()))
}

impl View {
    pub fn new(camera: Camera, gt_image: Image, mask: LabelMask) -> Result<Self> {
        camera.validate()?;
        if gt_image.width != camera.width || gt_image.height != camera.height {
            return Err(Error::Dimension("ground truth does not match camera resolution".into()));
        }
        if mask.width != gt_image.width || mask.height != gt_image.height {
            return Err(Error::Dimension("mask does not match image".into()));
        }
        Ok(Self {
            camera,
            gt_image,
            mask,
            content_features: None,
            content_key: None,
        })
    }

    pub fn cache_content_features(&mut self, pipeline: &FeaturePipeline) -> Result<()> {
        self.content_features = Some(pipeline.texture.extract(&self.gt_image)?);
        self.content_key = Some(image_key(&self.gt_image));
        Ok(())
    }

    /// Stores features computed elsewhere (e.g. loaded from a bundle).
    pub fn set_content_features(&mut self, features: FeatureMap) {
        self.content_features = Some(features);
        self.content_key = Some(image_key(&self.gt_image));
    }

    pub fn features_are_fresh(&self) -> bool {
        self.content_features.is_some() && self.content_key == Some(image_key(&self.gt_image))
    }
}

/// A style image prepared for matching.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    pub image: Image,
    pub mask: LabelMask,
    pub texture: FeatureMap,
    /// Semantic features aligned to the texture grid.
    pub semantic: Option<FeatureMap>,
    /// `mask` at texture-feature resolution.
    pub feature_mask: Option<LabelMask>,
}

impl StyleTarget {
    pub fn new(image: Image, mask: LabelMask, pipeline: &FeaturePipeline) -> Result<Self> {
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::Dimension("style mask does not match style image".into()));
        }
        let texture = pipeline.texture.extract(&image)?;
        let semantic = pipeline.semantic_aligned(&image)?;
        Self::from_features(image, mask, texture, semantic)
    }

    /// Uses the given semantic features (any resolution) instead of running
    /// the pipeline's semantic extractor.
    pub fn with_semantic(image: Image, mask: LabelMask, pipeline: &FeaturePipeline, semantic: FeatureMap) -> Result<Self> {
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::Dimension("style mask does not match style image".into()));
        }
        let texture = pipeline.texture.extract(&image)?;
        let semantic = resample_bilinear(&semantic, texture.height, texture.width);
        Self::from_features(image, mask, texture, Some(semantic))
    }

    fn from_features(image: Image, mask: LabelMask, texture: FeatureMap, semantic: Option<FeatureMap>) -> Result<Self> {
        let feature_mask = Some(downsample_mask(&mask, texture.height, texture.width));
        Ok(Self {
            image,
            mask,
            texture,
            semantic,
            feature_mask,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    ObjectSelect,
    Compositional,
    SemanticAware,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object-select" => Ok(TaskMode::ObjectSelect),
            "compositional" => Ok(TaskMode::Compositional),
            "semantic-aware" => Ok(TaskMode::SemanticAware),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// What a mask label is optimised towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Keep photorealistic: pixel MSE to the ground truth.
    Preserve,
    /// Stylise towards `styles[i]`.
    Style(usize),
    /// No loss term; the region is free to change.
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub step_size: f64,
    pub steps: usize,
    pub decay: f64,
    pub eps: f64,
    /// Views rendered per step; `None` uses every view.
    pub views_per_step: Option<usize>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            steps: 300,
            decay: 0.99,
            eps: 1e-8,
            views_per_step: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub mode: TaskMode,
    pub bindings: BTreeMap<u32, Binding>,
    pub styles: Vec<StyleTarget>,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl TaskSpec {
    /// Label 0 preserved, label 1 stylised with `style`.
    pub fn object_select(style: StyleTarget, loss: LossConfig, optim: OptimConfig) -> Self {
        Self {
            mode: TaskMode::ObjectSelect,
            bindings: BTreeMap::from([(0, Binding::Preserve), (1, Binding::Style(0))]),
            styles: vec![style],
            loss,
            optim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        for (&l, b) in &self.bindings {
            if let Binding::Style(i) = b {
                if *i >= self.styles.len() {
                    return Err(Error::Config(format!("label {l} references missing style {i}")));
                }
            }
        }
        match self.mode {
            TaskMode::ObjectSelect => {
                let labels: Vec<u32> = self.bindings.keys().copied().collect();
                if labels != [0, 1]
                    || !matches!(self.bindings[&0], Binding::Preserve | Binding::Ignore)
                    || !matches!(self.bindings[&1], Binding::Style(_))
                {
                    return Err(Error::Config(
                        "object selection binds exactly label 0 = preserve and label 1 = style".into(),
                    ));
                }
            }
            TaskMode::SemanticAware => {
                for s in &self.styles {
                    if s.semantic.is_none() || s.feature_mask.is_none() {
                        return Err(Error::Config("semantic-aware styles need semantic features".into()));
                    }
                }
            }
            TaskMode::Compositional => {}
        }
        Ok(())
    }

    pub fn check_views(&self, views: &[View]) -> Result<()> {
        for (i, v) in views.iter().enumerate() {
            for l in v.mask.distinct_labels() {
                if !self.bindings.contains_key(&l) {
                    return Err(Error::UnboundLabel(l));
                }
            }
            let uses_style = v
                .mask
                .distinct_labels()
                .iter()
                .any(|l| matches!(self.bindings[l], Binding::Style(_)));
            if uses_style && !v.features_are_fresh() {
                return Err(Error::StaleFeatures(i));
            }
        }
        Ok(())
    }
}

/// RMS-style adaptive step with bias-corrected second moment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsProp {
    pub step_size: f64,
    pub decay: f64,
    pub eps: f64,
    pub accumulator: Vec<f64>,
    pub steps: u64,
}

impl RmsProp {
    pub fn new(len: usize, step_size: f64, decay: f64, eps: f64) -> Self {
        Self {
            step_size,
            decay,
            eps,
            accumulator: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [f32], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.steps += 1;
        let correction = 1.0 - self.decay.powi(self.steps.min(i32::MAX as u64) as i32);
        for ((p, &g), a) in params.iter_mut().zip(grad).zip(self.accumulator.iter_mut()) {
            *a = self.decay * *a + (1.0 - self.decay) * g * g;
            let denom = (*a / correction).sqrt() + self.eps;
            *p = (*p as f64 - self.step_size * g / denom) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptState {
    pub step: usize,
    pub records: Vec<StepRecord>,
    pub optimizer: RmsProp,
}

impl OptState {
    /// Mean total loss over the last `window` records ending at `end` (exclusive).
    pub fn smoothed_total(&self, end: usize, window: usize) -> f64 {
        let start = end.saturating_sub(window);
        let s = &self.records[start..end];
        s.iter().map(|r| r.report.total).sum::<f64>() / s.len() as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub sh_step_size: f64,
    pub density_step_size: f64,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Weight of the harmonics smoothness term added to the pixel loss.
    pub tv_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            sh_step_size: 1e-2,
            density_step_size: 0.1,
            plateau_window: 50,
            plateau_tolerance: 1e-5,
            tv_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub grid: VoxelGrid,
    pub losses: Vec<f64>,
}

/// Raw density every voxel starts from before pretraining.
pub const INITIAL_DENSITY: f32 = 0.1;

/// Starting point for pretraining: small uniform density, mid-grey radiance
/// with seeded jitter.
pub fn initial_grid(dims: [usize; 3], bbox_min: [f64; 3], bbox_max: [f64; 3], sh_degree: usize, density: f32, seed: u64) -> Result<VoxelGrid> {
    use rand::Rng;
    let mut g = VoxelGrid::new(dims, bbox_min, bbox_max, sh_degree)?;
    g.density_mut()?.iter_mut().for_each(|d| *d = density);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = basis_count(sh_degree);
    let dc = (0.5 / crate::grid::SH_C0) as f32;
    for (i, v) in g.sh_mut().iter_mut().enumerate() {
        let jitter = rng.random_range(-0.05f32..0.05);
        *v = if i % b == 0 { dc + jitter } else { jitter * 0.1 };
    }
    Ok(g)
}

fn pixel_mse_grad(rendered: &Image, target: &Image) -> (f64, Image) {
    let n = rendered.data.len() as f64;
    let mut grad = Image::zeros(rendered.width, rendered.height);
    let mut sum = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    (sum / n, grad)
}

fn sum_in_order(buffers: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for b in buffers {
        total.iter_mut().zip(b).for_each(|(t, v)| *t += v);
    }
    total
}

/// Photometric pretraining of density and radiance; freezes density at the end.
pub fn pretrain(mut grid: VoxelGrid, views: &[View], cfg: &PretrainConfig, opts: &RenderOptions) -> Result<PretrainOutcome> {
    if views.len() < 2 {
        return Err(Error::Config("pretraining needs at least two views".into()));
    }
    grid.unfreeze_density();
    let mut sh_opt = RmsProp::new(grid.sh().len(), cfg.sh_step_size, 0.99, 1e-8);
    let mut density_opt = RmsProp::new(grid.voxel_count(), cfg.density_step_size, 0.99, 1e-8);
    let mut losses = Vec::new();
    let mut best = Vec::new();
    for _ in 0..cfg.steps {
        let per_view = par::map_slice(views, |v| -> Result<(f64, Vec<f64>, Vec<f64>)> {
            let (img, aux) = render_view(&grid, &v.camera, opts)?;
            let (loss, grad) = pixel_mse_grad(&img, &v.gt_image);
            let gs = backward_radiance(&grid, &aux, &grad)?;
            let gd = backward_density(&grid, &aux, &grad)?;
            Ok((loss, gs, gd))
        });
        let (tv, tv_grad) = if cfg.tv_weight > 0.0 { tv_loss(&grid) } else { (0.0, Vec::new()) };
        let mut loss = cfg.tv_weight * tv;
        let mut sh_parts = Vec::with_capacity(views.len());
        let mut d_parts = Vec::with_capacity(views.len());
        for r in per_view {
            let (l, gs, gd) = r?;
            loss += l / views.len() as f64;
            sh_parts.push(gs);
            d_parts.push(gd);
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss became {loss} at step {}", losses.len())));
        }
        losses.push(loss);
        best.push(best.last().map_or(loss, |&b: &f64| b.min(loss)));
        if loss == 0.0 {
            break;
        }
        // plateau: the best loss seen improved by less than the tolerance
        // over the last window
        let w = cfg.plateau_window;
        if best.len() > w {
            let (old, now) = (best[best.len() - 1 - w], best[best.len() - 1]);
            if (old - now) / old < cfg.plateau_tolerance {
                break;
            }
        }
        let scale = 1.0 / views.len() as f64;
        let mut gs = sum_in_order(sh_parts, grid.sh().len());
        let mut gd = sum_in_order(d_parts, grid.voxel_count());
        gs.iter_mut().for_each(|g| *g *= scale);
        gd.iter_mut().for_each(|g| *g *= scale);
        for (g, t) in gs.iter_mut().zip(&tv_grad) {
            *g += cfg.tv_weight * t;
        }
        sh_opt.apply(grid.sh_mut(), &gs);
        density_opt.apply(grid.density_mut()?, &gd);
    }
    grid.freeze_density();
    Ok(PretrainOutcome { grid, losses })
}

/// Affine colour map `x ↦ A x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineColorMap {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl AffineColorMap {
    pub const IDENTITY: Self = Self {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: [0.0; 3],
    };

    /// Pre-clamp image of one colour.
    pub fn apply_unclamped(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|j| self.matrix[i][j] * x[j]).sum::<f64>() + self.offset[i])
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        self.apply_unclamped(x).map(|v| v.clamp(0.0, 1.0))
    }
}

/// Regulariser added to colour covariances before taking square roots.
pub const COLOR_COV_EPS: f64 = 1e-5;
/// Selections smaller than this leave the images untouched.
pub const MIN_COLOR_PIXELS: usize = 10;

fn moments(pixels: &[[f64; 3]]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = pixels.len() as f64;
    let mut mu = Vector3::zeros();
    for p in pixels {
        mu += Vector3::from(*p);
    }
    mu /= n;
    let mut cov = Matrix3::zeros();
    for p in pixels {
        let d = Vector3::from(*p) - mu;
        cov += d * d.transpose();
    }
    cov /= n;
    (mu, cov + Matrix3::identity() * COLOR_COV_EPS)
}

fn sym_power(m: Matrix3<f64>, power: f64) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(m);
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.max(1e-12).powf(power)));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Which pixels of a set of images take part in colour transfer.
#[derive(Clone, Copy, Debug)]
pub struct Selection<'a> {
    pub masks: &'a [LabelMask],
    pub label: u32,
}

/// Moment-matching colour transfer from a pooled selection of `sources` to
/// the (optionally masked) `target`.
///
/// A single map is fitted to all selected source pixels so that their mean and
/// covariance match the target's, then applied to every selected pixel and
/// clamped to `[0, 1]`. Unselected pixels are copied unchanged.
pub fn color_transfer(
    sources: &[Image],
    source_selection: Option<Selection<'_>>,
    target: &Image,
    target_selection: Option<(&LabelMask, u32)>,
) -> Result<(Vec<Image>, AffineColorMap)> {
    if let Some(sel) = source_selection {
        if sel.masks.len() != sources.len() {
            return Err(Error::Dimension("one mask per source image is required".into()));
        }
    }
    let selected = |img: usize, p: usize| -> bool { source_selection.is_none_or(|s| s.masks[img].labels[p] == s.label) };
    let mut src_pixels = Vec::new();
    for (i, img) in sources.iter().enumerate() {
        for p in 0..img.pixel_count() {
            if selected(i, p) {
                src_pixels.push(img.pixel(p % img.width, p / img.width));
            }
        }
    }
    let tgt_pixels: Vec<[f64; 3]> = (0..target.pixel_count())
        .filter(|&p| target_selection.is_none_or(|(m, l)| m.labels[p] == l))
        .map(|p| target.pixel(p % target.width, p / target.width))
        .collect();
    if src_pixels.len() < MIN_COLOR_PIXELS || tgt_pixels.len() < MIN_COLOR_PIXELS {
        log::warn!(
            "colour transfer selection too small ({} source / {} target pixels); using identity",
            src_pixels.len(),
            tgt_pixels.len()
        );
        return Ok((sources.to_vec(), AffineColorMap::IDENTITY));
    }
    let (mu_s, cov_s) = moments(&src_pixels);
    let (mu_t, cov_t) = moments(&tgt_pixels);
    let a = sym_power(cov_t, 0.5) * sym_power(cov_s, -0.5);
    let b = mu_t - a * mu_s;
    let map = AffineColorMap {
        matrix: std::array::from_fn(|i| std::array::from_fn(|j| a[(i, j)])),
        offset: [b[0], b[1], b[2]],
    };
    let out = sources
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut o = img.clone();
            for p in 0..img.pixel_count() {
                if selected(i, p) {
                    let (x, y) = (p % img.width, p / img.width);
                    o.set_pixel(x, y, map.apply(img.pixel(x, y)));
                }
            }
            o
        })
        .collect();
    Ok((out, map))
}

/// Applies the task's colour-transfer policy to the views' ground truth and
/// re-caches their content features. Returns the map used per label.
///
/// Object selection and compositional tasks map each style-bound label region
/// to its whole style image; semantic-aware tasks map it to the style pixels
/// carrying the same label.
pub fn apply_task_color_transfer(views: &mut [View], task: &TaskSpec, pipeline: &FeaturePipeline) -> Result<BTreeMap<u32, AffineColorMap>> {
    let mut maps = BTreeMap::new();
    for (&label, binding) in &task.bindings {
        let Binding::Style(si) = *binding else { continue };
        let style = &task.styles[si];
        let sources: Vec<Image> = views.iter().map(|v| v.gt_image.clone()).collect();
        let masks: Vec<LabelMask> = views.iter().map(|v| v.mask.clone()).collect();
        let target_sel = (task.mode == TaskMode::SemanticAware).then_some((&style.mask, label));
        let (out, map) = color_transfer(&sources, Some(Selection { masks: &masks, label }), &style.image, target_sel)?;
        for (v, img) in views.iter_mut().zip(out) {
            v.gt_image = Image { id: v.gt_image.id.clone(), ..img };
        }
        maps.insert(label, map);
    }
    for v in views.iter_mut() {
        v.cache_content_features(pipeline)?;
    }
    Ok(maps)
}

/// Everything one optimisation step computes before the update.
pub struct StepGradients {
    pub per_view: Vec<Vec<f64>>,
    pub view_indices: Vec<usize>,
    pub auxes: Vec<RenderAux>,
    pub pixel_grads: Vec<Image>,
    /// Sum of the per-view buffers (fixed view order), without TV.
    pub view_total: Vec<f64>,
    pub tv_grad: Vec<f64>,
    pub report: LossReport,
}

impl StepGradients {
    pub fn total(&self) -> Vec<f64> {
        self.view_total.iter().zip(&self.tv_grad).map(|(a, b)| a + b).collect()
    }
}

/// Renders the chosen views, evaluates the composite loss and back-propagates
/// to harmonics coefficients.
pub fn step_gradients(
    grid: &VoxelGrid,
    views: &[View],
    view_indices: &[usize],
    task: &TaskSpec,
    pipeline: &FeaturePipeline,
    opts: &RenderOptions,
) -> Result<StepGradients> {
    let results = par::map_slice(view_indices, |&vi| -> Result<_> {
        let v = &views[vi];
        let (img, aux) = render_view(grid, &v.camera, opts)?;
        let (report, pixel_grad) = view_loss(&img, v, task, pipeline)?;
        let g = backward_radiance(grid, &aux, &pixel_grad)?;
        Ok((report, pixel_grad, aux, g))
    });
    let mut report = LossReport {
        lambda: task.loss.lambda,
        lambda_tv: task.loss.lambda_tv,
        ..Default::default()
    };
    let mut per_view = Vec::with_capacity(results.len());
    let mut auxes = Vec::with_capacity(results.len());
    let mut pixel_grads = Vec::with_capacity(results.len());
    for r in results {
        let (rep, pg, aux, g) = r?;
        report.style += rep.style;
        report.content += rep.content;
        report.preserve += rep.preserve;
        report.feature_pixels += rep.feature_pixels;
        report.pixels += rep.pixels;
        for (l, n) in rep.label_pixels {
            *report.label_pixels.entry(l).or_default() += n;
        }
        per_view.push(g);
        auxes.push(aux);
        pixel_grads.push(pg);
    }
    let (tv, mut tv_grad) = tv_loss(grid);
    tv_grad.iter_mut().for_each(|g| *g *= task.loss.lambda_tv);
    report.tv = tv;
    report.total = report.weighted_total();
    let view_total = sum_in_order(per_view.clone(), grid.sh().len());
    Ok(StepGradients {
        per_view,
        view_indices: view_indices.to_vec(),
        auxes,
        pixel_grads,
        view_total,
        tv_grad,
        report,
    })
}

/// Fine-tunes radiance only; density must already be frozen.
pub fn finetune(
    grid: VoxelGrid,
    views: &[View],
    task: &TaskSpec,
    pipeline: &FeaturePipeline,
    opts: &RenderOptions,
) -> Result<(VoxelGrid, OptState)> {
    finetune_with(grid, views, task, pipeline, opts, |_, _| {})
}

/// [`finetune`] with a per-step observer (called after each update).
pub fn finetune_with(
    mut grid: VoxelGrid,
    views: &[View],
    task: &TaskSpec,
    pipeline: &FeaturePipeline,
    opts: &RenderOptions,
    mut observe: impl FnMut(&StepRecord, &VoxelGrid),
) -> Result<(VoxelGrid, OptState)> {
    if !grid.is_density_frozen() {
        return Err(Error::Contract("fine-tuning needs a pretrained grid with frozen density".into()));
    }
    task.validate()?;
    task.check_views(views)?;
    let o = &task.optim;
    let mut state = OptState {
        step: 0,
        records: Vec::with_capacity(o.steps),
        optimizer: RmsProp::new(grid.sh().len(), o.step_size, o.decay, o.eps),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut order: Vec<usize> = (0..views.len()).collect();
    for step in 0..o.steps {
        let chosen: Vec<usize> = match o.views_per_step {
            Some(k) if k < views.len() => {
                order.shuffle(&mut rng);
                let mut c = order[..k.max(1)].to_vec();
                c.sort_unstable();
                c
            }
            _ => order.clone(),
        };
        let sg = step_gradients(&grid, views, &chosen, task, pipeline, opts)?;
        if !sg.report.total.is_finite() {
            return Err(Error::Numerical(format!("loss became {} at step {step}", sg.report.total)));
        }
        let total = sg.total();
        state.optimizer.apply(grid.sh_mut(), &total);
        let record = StepRecord {
            step,
            report: sg.report,
        };
        observe(&record, &grid);
        state.records.push(record);
        state.step = step + 1;
    }
    Ok((grid, state))
}

/// One view/label share of a voxel's accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub view: usize,
    pub label: u32,
    pub preserve: bool,
    /// Total rendering weight of the voxel over the view's pixels with this label.
    pub weight: f64,
    /// Gradient this share adds to the voxel's harmonics coefficients.
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub point: [f64; 3],
    pub voxel: [usize; 3],
    pub contributions: Vec<Contribution>,
    /// Rendering weight per view (summed over labels).
    pub view_weights: Vec<f64>,
    /// The voxel's entry in the step's summed view gradient.
    pub accumulated: Vec<f64>,
    pub tv_grad: Vec<f64>,
}

impl AuditReport {
    fn sum_where(&self, pred: impl Fn(&Contribution) -> bool) -> Vec<f64> {
        let mut out = vec![0.0; self.accumulated.len()];
        for c in self.contributions.iter().filter(|c| pred(c)) {
            out.iter_mut().zip(&c.grad).for_each(|(o, g)| *o += g);
        }
        out
    }

    /// Gradient coming from preserve-bound pixels.
    pub fn preserve_direction(&self) -> Vec<f64> {
        self.sum_where(|c| c.preserve)
    }

    pub fn style_direction(&self) -> Vec<f64> {
        self.sum_where(|c| !c.preserve)
    }

    pub fn contribution_sum(&self) -> Vec<f64> {
        self.sum_where(|_| true)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

/// Breaks down the gradient reaching the lattice node nearest `point` by view
/// and by the label of the pixels it was rendered into.
pub fn gradient_audit(
    grid: &VoxelGrid,
    views: &[View],
    task: &TaskSpec,
    pipeline: &FeaturePipeline,
    opts: &RenderOptions,
    point: [f64; 3],
) -> Result<AuditReport> {
    let voxel = grid.nearest_node(point)?;
    task.validate()?;
    task.check_views(views)?;
    let all: Vec<usize> = (0..views.len()).collect();
    let sg = step_gradients(grid, views, &all, task, pipeline, opts)?;
    let degree = grid.sh_degree();
    let b = basis_count(degree);
    let k = 3 * b;

    let mut contributions = Vec::new();
    let mut view_weights = Vec::with_capacity(views.len());
    for (slot, &vi) in sg.view_indices.iter().enumerate() {
        let aux = &sg.auxes[slot];
        let pg = &sg.pixel_grads[slot];
        let mut by_label: BTreeMap<u32, (f64, Vec<f64>)> = BTreeMap::new();
        let mut view_weight = 0.0;
        for p in 0..aux.pixels.len() {
            let basis = sh_basis(degree, aux.pixels[p].direction);
            let label = views[vi].mask.labels[p];
            for s in aux.pixel_samples(p) {
                for (&i, &fw) in s.footprint.indices.iter().zip(&s.footprint.weights) {
                    if i as usize != voxel || fw == 0.0 {
                        continue;
                    }
                    let w = fw * s.weight;
                    view_weight += w;
                    let entry = by_label.entry(label).or_insert_with(|| (0.0, vec![0.0; k]));
                    entry.0 += w;
                    for ch in 0..3 {
                        let pre = aux.pre_clamp.data[p * 3 + ch];
                        let g = if (0.0..=1.0).contains(&pre) { pg.data[p * 3 + ch] } else { 0.0 };
                        for bi in 0..b {
                            entry.1[ch * b + bi] += w * g * basis[bi];
                        }
                    }
                }
            }
        }
        view_weights.push(view_weight);
        for (label, (weight, grad)) in by_label {
            contributions.push(Contribution {
                view: vi,
                label,
                preserve: task.bindings.get(&label) == Some(&Binding::Preserve),
                weight,
                grad,
            });
        }
    }
    if view_weights.iter().all(|&w| w == 0.0) {
        contributions.clear();
    }
    Ok(AuditReport {
        point,
        voxel: grid.coords(voxel),
        contributions,
        view_weights,
        accumulated: sg.view_total[voxel * k..(voxel + 1) * k].to_vec(),
        tv_grad: sg.tv_grad[voxel * k..(voxel + 1) * k].to_vec(),
    })
}

/// Labels used by a set of views.
pub fn labels_in(views: &[View]) -> BTreeSet<u32> {
    views.iter().flat_map(|v| v.mask.distinct_labels()).collect()
}
