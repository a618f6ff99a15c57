//! Loss terms and their gradients with respect to rendered pixels.
//!
//! The composite objective for one view is
//!
//! ```text
//! total = style + λ · content + preserve + λ_tv · tv
//! ```
//!
//! where `style` and `content` are sums over feature-resolution pixels of
//! style-bound labels divided by the feature pixel count `N`, `preserve` is the
//! per-pixel colour MSE over preserve-bound pixels divided by the full-resolution
//! pixel count, and `tv` is the grid total variation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feat::{downsample_mask, FeatureMap, FeaturePipeline};
use crate::grid::VoxelGrid;
use crate::image::{Image, LabelMask};
use crate::matching::{dot, nnfm_match, SemanticIndex, SemanticMatchInput, StyleIndex};
use crate::stylize::{Binding, TaskMode, TaskSpec, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Content weight.
    pub lambda: f64,
    /// Total-variation weight.
    pub lambda_tv: f64,
    /// Texture share of the semantic-aware matching distance.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            lambda_tv: 1.0,
            alpha: 0.5,
        }
    }
}

impl LossConfig {
    /// Content weight suggested for 360° captures.
    pub const LAMBDA_360: f64 = 0.005;

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lambda_tv >= 0.0) {
            return Err(Error::Config("lambda and lambda_tv must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub preserve: f64,
    pub tv: f64,
    pub lambda: f64,
    pub lambda_tv: f64,
    /// Full-resolution pixel count per label.
    pub label_pixels: BTreeMap<u32, usize>,
    /// Feature-resolution pixel count `N`.
    pub feature_pixels: usize,
    pub pixels: usize,
}

impl LossReport {
    pub fn weighted_total(&self) -> f64 {
        self.style + self.lambda * self.content + self.preserve + self.lambda_tv * self.tv
    }
}

/// Mean squared error over all entries; gradient `2 (r − c) / count`.
pub fn l2_feature_loss(rendered: &FeatureMap, content: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if !rendered.same_shape(content) {
        return Err(Error::Dimension("l2 feature loss needs equal shapes".into()));
    }
    let n = rendered.data.len() as f64;
    let mut grad = rendered.zeros_like();
    let mut sum = 0.0;
    for ((g, r), c) in grad.data.iter_mut().zip(&rendered.data).zip(&content.data) {
        let d = r - c;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Colour MSE restricted to `region` pixels; zero gradient elsewhere.
pub fn l2_pixel_loss(rendered: &Image, target: &Image, region: &[bool]) -> Result<(f64, Image)> {
    if !rendered.same_dims(target) || region.len() != rendered.pixel_count() {
        return Err(Error::Dimension("l2 pixel loss needs equal dims".into()));
    }
    let count = region.iter().filter(|&&r| r).count() * 3;
    let mut grad = Image::zeros(rendered.width, rendered.height);
    if count == 0 {
        log::warn!("l2 pixel loss over an empty region");
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    for (p, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        for c in 0..3 {
            let d = rendered.data[p * 3 + c] - target.data[p * 3 + c];
            sum += d * d;
            grad.data[p * 3 + c] = 2.0 * d / count as f64;
        }
    }
    Ok((sum / count as f64, grad))
}

/// Mean squared difference of adjacent-voxel harmonics coefficients over the
/// three axes, with its analytic gradient.
pub fn tv_loss(grid: &VoxelGrid) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = grid.dims();
    let k = grid.coeffs_per_voxel();
    let sh = grid.sh();
    let pairs = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1);
    let denom = (pairs * k) as f64;
    let mut grad = vec![0.0; sh.len()];
    let mut sum = 0.0;
    let strides = [1, nx, nx * ny];
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let i = grid.index(ix, iy, iz);
                let pos = [ix, iy, iz];
                for axis in 0..3 {
                    if pos[axis] + 1 >= grid.dims()[axis] {
                        continue;
                    }
                    let j = i + strides[axis];
                    for c in 0..k {
                        let d = sh[j * k + c] as f64 - sh[i * k + c] as f64;
                        sum += d * d;
                        grad[j * k + c] += 2.0 * d / denom;
                        grad[i * k + c] -= 2.0 * d / denom;
                    }
                }
            }
        }
    }
    (sum / denom, grad)
}

/// Gradient of `D(a, b)` with respect to `a`, scaled by `scale`, added to `out`.
fn add_cosine_grad(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    if na2 == 0.0 || nb2 == 0.0 {
        return;
    }
    let na = na2.sqrt();
    let nb = nb2.sqrt();
    let ab = dot(a, b);
    // dD/da = −b/(|a||b|) + (a·b) a / (|a|³ |b|)
    let c1 = -1.0 / (na * nb);
    let c2 = ab / (na2 * na * nb);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (c1 * bi + c2 * ai);
    }
}

/// Mean over pixels of the nearest cosine distance to the style map.
///
/// The gradient treats the matched style vectors as constants.
pub fn nnfm_loss(rendered: &FeatureMap, style: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let m = nnfm_match(rendered, style)?;
    let n = rendered.pixel_count() as f64;
    let mut grad = rendered.zeros_like();
    for p in 0..rendered.pixel_count() {
        add_cosine_grad(
            rendered.vector(p),
            style.vector(m.indices[p]),
            1.0 / n,
            grad.vector_mut(p),
        );
    }
    Ok((m.distances.iter().sum::<f64>() / n, grad))
}

/// Texture-space cosine distance to the semantic-aware match, averaged over
/// the rendered pixels carrying `label`. No gradient reaches semantic maps.
pub fn sannfm_loss(label: u32, input: SemanticMatchInput<'_>) -> Result<(f64, FeatureMap)> {
    let index = SemanticIndex::new(input)?;
    let pixels: Vec<usize> = (0..input.rendered_mask.labels.len())
        .filter(|&p| input.rendered_mask.labels[p] == label)
        .collect();
    let mut grad = input.rendered_texture.zeros_like();
    if pixels.is_empty() {
        return Ok((0.0, grad));
    }
    let n = pixels.len() as f64;
    let mut sum = 0.0;
    for &p in &pixels {
        let (s, _, _) = index.nearest(p);
        let a = input.rendered_texture.vector(p);
        let b = input.style_texture.vector(s);
        let nb = dot(b, b);
        sum += crate::matching::cosine_distance_with_norms(a, b, dot(a, a), nb);
        add_cosine_grad(a, b, 1.0 / n, grad.vector_mut(p));
    }
    Ok((sum / n, grad))
}

/// Features of a rendered view needed by the composite loss.
pub struct RenderedFeatures {
    pub texture: FeatureMap,
    pub semantic: Option<FeatureMap>,
    /// View mask at texture-feature resolution.
    pub mask: LabelMask,
}

impl RenderedFeatures {
    pub fn compute(rendered: &Image, mask: &LabelMask, pipeline: &FeaturePipeline, need_semantic: bool) -> Result<Self> {
        let texture = pipeline.texture.extract(rendered)?;
        let semantic = if need_semantic {
            let s = pipeline.semantic_aligned(rendered)?;
            if s.is_none() {
                return Err(Error::Config("semantic-aware task needs a semantic extractor".into()));
            }
            s
        } else {
            None
        };
        let mask = downsample_mask(mask, texture.height, texture.width);
        Ok(Self { texture, semantic, mask })
    }
}

/// Contribution of one label to the composite loss (unnormalised sums).
#[derive(Clone, Debug)]
pub struct LabelTerm {
    pub label: u32,
    pub style_sum: f64,
    pub content_sum: f64,
    pub preserve_sum: f64,
    /// Gradient of `(style_sum + λ·content_sum) / N` w.r.t. rendered texture features.
    pub feature_grad: Option<FeatureMap>,
    /// Gradient of `preserve_sum / pixels` w.r.t. rendered pixels.
    pub pixel_grad: Option<Image>,
}

/// Per-label loss terms for one rendered view.
pub fn label_terms(
    rendered: &Image,
    features: Option<&RenderedFeatures>,
    view: &View,
    task: &TaskSpec,
) -> Result<Vec<LabelTerm>> {
    let labels = view.mask.distinct_labels();
    for &l in &labels {
        if !task.bindings.contains_key(&l) {
            return Err(Error::UnboundLabel(l));
        }
    }
    let full_n = rendered.pixel_count() as f64;
    let lambda = task.loss.lambda;
    let mut out = Vec::with_capacity(labels.len());
    for &label in &labels {
        match task.bindings[&label] {
            Binding::Ignore => out.push(LabelTerm {
                label,
                style_sum: 0.0,
                content_sum: 0.0,
                preserve_sum: 0.0,
                feature_grad: None,
                pixel_grad: None,
            }),
            Binding::Preserve => {
                let mut grad = Image::zeros(rendered.width, rendered.height);
                let mut sum = 0.0;
                for p in 0..rendered.pixel_count() {
                    if view.mask.labels[p] != label {
                        continue;
                    }
                    for c in 0..3 {
                        let d = rendered.data[p * 3 + c] - view.gt_image.data[p * 3 + c];
                        sum += d * d / 3.0;
                        grad.data[p * 3 + c] = 2.0 * d / (3.0 * full_n);
                    }
                }
                out.push(LabelTerm {
                    label,
                    style_sum: 0.0,
                    content_sum: 0.0,
                    preserve_sum: sum,
                    feature_grad: None,
                    pixel_grad: Some(grad),
                });
            }
            Binding::Style(si) => {
                let f = features.ok_or_else(|| Error::Config("style label without rendered features".into()))?;
                let target = task
                    .styles
                    .get(si)
                    .ok_or_else(|| Error::Config(format!("label {label} references missing style {si}")))?;
                let content = view
                    .content_features
                    .as_ref()
                    .ok_or_else(|| Error::Config("view has no cached content features".into()))?;
                if !content.same_shape(&f.texture) {
                    return Err(Error::Dimension("content features do not match rendered features".into()));
                }
                let n = f.texture.pixel_count() as f64;
                let pixels: Vec<usize> = (0..f.mask.labels.len()).filter(|&p| f.mask.labels[p] == label).collect();
                let mut grad = f.texture.zeros_like();
                let mut style_sum = 0.0;
                let mut content_sum = 0.0;
                let semantic_index;
                let texture_index;
                enum Search<'a> {
                    Texture(&'a StyleIndex<'a>),
                    Semantic(&'a SemanticIndex<'a>),
                }
                let search = if task.mode == TaskMode::SemanticAware {
                    let (Some(rs), Some(ss), Some(sm)) =
                        (f.semantic.as_ref(), target.semantic.as_ref(), target.feature_mask.as_ref())
                    else {
                        return Err(Error::Config(
                            "semantic-aware binding needs semantic features and a style mask".into(),
                        ));
                    };
                    semantic_index = SemanticIndex::new(SemanticMatchInput {
                        rendered_texture: &f.texture,
                        rendered_semantic: rs,
                        style_texture: &target.texture,
                        style_semantic: ss,
                        rendered_mask: &f.mask,
                        style_mask: sm,
                        alpha: task.loss.alpha,
                    })?;
                    Search::Semantic(&semantic_index)
                } else {
                    if target.texture.channels != f.texture.channels {
                        return Err(Error::Dimension("style and rendered channels differ".into()));
                    }
                    texture_index = StyleIndex::new(&target.texture);
                    Search::Texture(&texture_index)
                };
                let matches = crate::par::map_slice(&pixels, |&p| {
                    let a = f.texture.vector(p);
                    match &search {
                        Search::Texture(ix) => ix.nearest(a, dot(a, a), None).0,
                        Search::Semantic(ix) => ix.nearest(p).0,
                    }
                });
                let ch = f.texture.channels as f64;
                for (&p, &s) in pixels.iter().zip(&matches) {
                    let a = f.texture.vector(p);
                    let b = target.texture.vector(s);
                    style_sum += crate::matching::cosine_distance_with_norms(a, b, dot(a, a), dot(b, b));
                    let g = grad.vector_mut(p);
                    add_cosine_grad(a, b, 1.0 / n, g);
                    let c = content.vector(p);
                    for k in 0..a.len() {
                        let d = a[k] - c[k];
                        content_sum += d * d / ch;
                        g[k] += lambda * 2.0 * d / (ch * n);
                    }
                }
                out.push(LabelTerm {
                    label,
                    style_sum,
                    content_sum,
                    preserve_sum: 0.0,
                    feature_grad: Some(grad),
                    pixel_grad: None,
                });
            }
        }
    }
    Ok(out)
}

/// Output of [`composite_masked_loss`].
#[derive(Clone, Debug)]
pub struct MaskedLoss {
    pub report: LossReport,
    /// Gradient of the view terms (everything except TV) w.r.t. rendered pixels.
    pub pixel_grad: Image,
    /// `λ_tv ·` gradient of the TV term w.r.t. harmonics coefficients.
    pub tv_grad: Vec<f64>,
}

/// Label-dispatched loss for one rendered view.
pub fn composite_masked_loss(
    rendered: &Image,
    grid: &VoxelGrid,
    view: &View,
    task: &TaskSpec,
    pipeline: &FeaturePipeline,
) -> Result<MaskedLoss> {
    let (mut report, pixel_grad) = view_loss(rendered, view, task, pipeline)?;
    let (tv, mut tv_grad) = tv_loss(grid);
    tv_grad.iter_mut().for_each(|g| *g *= task.loss.lambda_tv);
    report.tv = tv;
    report.total = report.weighted_total();
    Ok(MaskedLoss {
        report,
        pixel_grad,
        tv_grad,
    })
}

/// View terms of the composite loss (no TV) and their pixel gradient.
pub fn view_loss(rendered: &Image, view: &View, task: &TaskSpec, pipeline: &FeaturePipeline) -> Result<(LossReport, Image)> {
    task.loss.validate()?;
    if !rendered.same_dims(&view.gt_image) {
        return Err(Error::Dimension("rendered image and ground truth differ in size".into()));
    }
    let needs_features = view
        .mask
        .distinct_labels()
        .iter()
        .any(|l| matches!(task.bindings.get(l), Some(Binding::Style(_))));
    let features = if needs_features {
        // Renders carry their view's id so precomputed extractors resolve to
        // that view's stored features.
        let keyed = Image {
            id: view.gt_image.id.clone(),
            ..rendered.clone()
        };
        Some(RenderedFeatures::compute(
            &keyed,
            &view.mask,
            pipeline,
            task.mode == TaskMode::SemanticAware,
        )?)
    } else {
        None
    };
    let terms = label_terms(rendered, features.as_ref(), view, task)?;

    let full_n = rendered.pixel_count();
    let feat_n = features.as_ref().map_or(0, |f| f.texture.pixel_count());
    let mut report = LossReport {
        lambda: task.loss.lambda,
        lambda_tv: task.loss.lambda_tv,
        feature_pixels: feat_n,
        pixels: full_n,
        ..Default::default()
    };
    for l in view.mask.distinct_labels() {
        report.label_pixels.insert(l, view.mask.count(l));
    }
    let mut pixel_grad = Image::zeros(rendered.width, rendered.height);
    let mut feature_grad: Option<FeatureMap> = None;
    for t in &terms {
        if feat_n > 0 {
            report.style += t.style_sum / feat_n as f64;
            report.content += t.content_sum / feat_n as f64;
        }
        report.preserve += t.preserve_sum / full_n as f64;
        if let Some(g) = &t.pixel_grad {
            pixel_grad.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = &t.feature_grad {
            match &mut feature_grad {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => feature_grad = Some(g.clone()),
            }
        }
    }
    if let Some(fg) = feature_grad {
        let back = pipeline.texture.backprop(rendered, &fg)?;
        pixel_grad.data.iter_mut().zip(&back.data).for_each(|(a, b)| *a += b);
    }
    report.total = report.weighted_total();
    Ok((report, pixel_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feat::FeatureSpace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(), FeatureSpace::Texture)
            .unwrap()
    }

    fn fd_check_map(f: impl Fn(&FeatureMap) -> f64, x: &FeatureMap, grad: &FeatureMap, tol: f64) {
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!(
                (fd - grad.data[i]).abs() <= tol * fd.abs().max(1.0),
                "entry {i}: fd {fd} vs analytic {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn l2_feature_basics() {
        let a = random_map(3, 4, 5, 1);
        let (v, g) = l2_feature_loss(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
        let mut b = a.clone();
        b.data.iter_mut().for_each(|x| *x += 1.0);
        assert!((l2_feature_loss(&b, &a).unwrap().0 - 1.0).abs() < 1e-12);
        let c = random_map(3, 4, 5, 2);
        let (_, g) = l2_feature_loss(&b, &c).unwrap();
        fd_check_map(|x| l2_feature_loss(x, &c).unwrap().0, &b, &g, 1e-6);
        assert!(l2_feature_loss(&a, &random_map(3, 3, 5, 1)).is_err());
    }

    #[test]
    fn l2_pixel_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Image::new(4, 3, (0..36).map(|_| rng.random()).collect()).unwrap();
        let all = vec![true; 12];
        assert_eq!(l2_pixel_loss(&a, &a, &all).unwrap().0, 0.0);
        let mut b = a.clone();
        b.data[0] += 0.5;
        let mut region = vec![true; 12];
        region[0] = false;
        assert_eq!(l2_pixel_loss(&a, &b, &region).unwrap().0, 0.0);
        let (v, g) = l2_pixel_loss(&a, &b, &[false; 12]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));

        let c = Image::new(4, 3, (0..36).map(|_| rng.random()).collect()).unwrap();
        let region: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let (_, g) = l2_pixel_loss(&a, &c, &region).unwrap();
        let eps = 1e-6;
        for i in 0..36 {
            let mut p = a.clone();
            p.data[i] += eps;
            let mut m = a.clone();
            m.data[i] -= eps;
            let fd = (l2_pixel_loss(&p, &c, &region).unwrap().0 - l2_pixel_loss(&m, &c, &region).unwrap().0) / (2.0 * eps);
            assert!((fd - g.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn tv_of_constant_grid_is_zero() {
        let mut g = VoxelGrid::new([3, 4, 2], [0.0; 3], [1.0; 3], 1).unwrap();
        g.sh_mut().iter_mut().for_each(|v| *v = 0.7);
        let (v, grad) = tv_loss(&g);
        assert_eq!(v, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tv_single_step_matches_direct_sum() {
        let mut g = VoxelGrid::new([3, 3, 3], [0.0; 3], [1.0; 3], 1).unwrap();
        // one voxel differs from its +x neighbour only? set a corner voxel so it has 3 neighbours
        let i = g.index(0, 0, 0);
        g.sh_mut()[i * 12 + 5] = 1.0;
        // direct summation oracle over all adjacent pairs
        let k = 12;
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..27 {
            for b in 0..27 {
                let [ax, ay, az] = g.coords(a);
                let [bx, by, bz] = g.coords(b);
                let manhattan = ax.abs_diff(bx) + ay.abs_diff(by) + az.abs_diff(bz);
                if manhattan == 1 && a < b {
                    pairs += 1;
                    for c in 0..k {
                        let d = g.sh()[a * k + c] as f64 - g.sh()[b * k + c] as f64;
                        sum += d * d;
                    }
                }
            }
        }
        let oracle = sum / (pairs * k) as f64;
        let (v, _) = tv_loss(&g);
        assert!((v - oracle).abs() < 1e-15);
        // the corner voxel touches 3 neighbours
        assert!((v - 3.0 / (pairs * k) as f64).abs() < 1e-15);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut g = VoxelGrid::new([3, 3, 2], [0.0; 3], [1.0; 3], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        g.sh_mut().iter_mut().for_each(|v| *v = rng.random::<f32>());
        let (_, grad) = tv_loss(&g);
        for i in (0..g.sh().len()).step_by(7) {
            let orig = g.sh()[i];
            let eps = 1e-2f32;
            g.sh_mut()[i] = orig + eps;
            let hi = g.sh()[i] as f64;
            let fp = tv_loss(&g).0;
            g.sh_mut()[i] = orig - eps;
            let lo = g.sh()[i] as f64;
            let fm = tv_loss(&g).0;
            g.sh_mut()[i] = orig;
            let fd = (fp - fm) / (hi - lo);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn nnfm_loss_zero_when_style_contains_content() {
        let a = random_map(3, 3, 4, 1);
        let (v, _) = nnfm_loss(&a, &a).unwrap();
        assert!(v < 1e-12);
        let s = FeatureMap::new(1, 1, 2, vec![0.0, 1.0], FeatureSpace::Texture).unwrap();
        let r = FeatureMap::new(1, 1, 2, vec![1.0, 1.0], FeatureSpace::Texture).unwrap();
        let expected = crate::matching::cosine_distance(r.vector(0), s.vector(0)).unwrap();
        assert!((nnfm_loss(&r, &s).unwrap().0 - expected).abs() < 1e-15);
    }

    #[test]
    fn nnfm_gradient_with_frozen_assignment() {
        let r = random_map(3, 3, 5, 10);
        let s = random_map(4, 4, 5, 11);
        let (_, grad) = nnfm_loss(&r, &s).unwrap();
        let assignment = nnfm_match(&r, &s).unwrap().indices;
        let frozen = |x: &FeatureMap| -> f64 {
            (0..x.pixel_count())
                .map(|p| crate::matching::cosine_distance(x.vector(p), s.vector(assignment[p])).unwrap())
                .sum::<f64>()
                / x.pixel_count() as f64
        };
        fd_check_map(frozen, &r, &grad, 1e-5);
    }

    #[test]
    fn sannfm_loss_collapses_and_checks_gradient() {
        let rt = random_map(3, 3, 5, 20);
        let rs = random_map(3, 3, 2, 21);
        let st = random_map(4, 4, 5, 22);
        let ss = random_map(4, 4, 2, 23);
        let rm = LabelMask::uniform(3, 3, 0);
        let sm = LabelMask::uniform(4, 4, 0);
        let input = SemanticMatchInput {
            rendered_texture: &rt,
            rendered_semantic: &rs,
            style_texture: &st,
            style_semantic: &ss,
            rendered_mask: &rm,
            style_mask: &sm,
            alpha: 1.0,
        };
        let (v, _) = sannfm_loss(0, input).unwrap();
        assert!((v - nnfm_loss(&rt, &st).unwrap().0).abs() < 1e-15);

        // identical maps and masks -> zero
        let same = SemanticMatchInput {
            rendered_texture: &rt,
            rendered_semantic: &rs,
            style_texture: &rt,
            style_semantic: &rs,
            rendered_mask: &rm,
            style_mask: &rm,
            alpha: 0.5,
        };
        assert!(sannfm_loss(0, same).unwrap().0 < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rm2 = LabelMask::new(3, 3, (0..9).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let sm2 = LabelMask::new(4, 4, (0..16).map(|i| (i % 2) as u32).collect()).unwrap();
        let input = SemanticMatchInput {
            rendered_mask: &rm2,
            style_mask: &sm2,
            alpha: 0.5,
            ..input
        };
        let label = rm2.labels[0];
        let (_, grad) = sannfm_loss(label, input).unwrap();
        let assignment = crate::matching::sannfm_match(input).unwrap().indices;
        let count = rm2.count(label) as f64;
        let frozen = |x: &FeatureMap| -> f64 {
            (0..9)
                .filter(|&p| rm2.labels[p] == label)
                .map(|p| crate::matching::cosine_distance(x.vector(p), st.vector(assignment[p])).unwrap())
                .sum::<f64>()
                / count
        };
        fd_check_map(frozen, &rt, &grad, 1e-5);
    }
}
