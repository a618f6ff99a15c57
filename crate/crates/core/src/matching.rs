//! Nearest-neighbour feature matching under cosine distance.
//!
//! Plain matching searches every style pixel. Semantic-aware matching only
//! searches style pixels carrying the content pixel's label and ranks them by
//! `α · D_texture + (1 − α) · D_semantic`. Ties go to the smallest row-major
//! style index, so serial and parallel runs agree exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::feat::FeatureMap;
use crate::image::LabelMask;
use crate::par;

/// Distance assigned when either vector has zero norm.
pub const DEGENERATE_DISTANCE: f64 = 2.0;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine distance from precomputed squared norms.
#[inline]
pub(crate) fn cosine_distance_with_norms(a: &[f64], b: &[f64], na2: f64, nb2: f64) -> f64 {
    if na2 == 0.0 || nb2 == 0.0 {
        return DEGENERATE_DISTANCE;
    }
    (1.0 - dot(a, b) / (na2 * nb2).sqrt()).clamp(0.0, 2.0)
}

/// `1 − cos(angle)` between two non-zero vectors, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    let (na2, nb2) = (dot(a, a), dot(b, b));
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(cosine_distance_with_norms(a, b, na2, nb2))
}

pub(crate) fn squared_norms(map: &FeatureMap) -> Vec<f64> {
    (0..map.pixel_count())
        .map(|p| {
            let v = map.vector(p);
            dot(v, v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub style_width: usize,
    /// Matched style pixel (row-major index) per content pixel.
    pub indices: Vec<usize>,
    /// Distance achieved by each match (blended for semantic-aware matching).
    pub distances: Vec<f64>,
    /// Number of style candidates per content label (semantic-aware only).
    pub candidate_counts: BTreeMap<u32, usize>,
    /// Content pixels matched without label restriction because their label
    /// had no style candidates.
    pub fallback_pixels: usize,
    /// Content pixels whose feature vector had zero norm.
    pub degenerate_pixels: usize,
}

impl MatchResult {
    /// Matched style pixel as `(x′, y′)`.
    pub fn index_xy(&self, pixel: usize) -> (usize, usize) {
        let i = self.indices[pixel];
        (i % self.style_width, i / self.style_width)
    }
}

/// Prepared texture-only search over a style map.
pub(crate) struct StyleIndex<'a> {
    map: &'a FeatureMap,
    norms: Vec<f64>,
}

impl<'a> StyleIndex<'a> {
    pub(crate) fn new(map: &'a FeatureMap) -> Self {
        Self {
            norms: squared_norms(map),
            map,
        }
    }

    /// Argmin over `candidates` (ascending style indices), or all style pixels.
    pub(crate) fn nearest(&self, v: &[f64], nv2: f64, candidates: Option<&[usize]>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut consider = |s: usize| {
            let d = cosine_distance_with_norms(v, self.map.vector(s), nv2, self.norms[s]);
            if d < best.1 {
                best = (s, d);
            }
        };
        match candidates {
            Some(c) => c.iter().for_each(|&s| consider(s)),
            None => (0..self.map.pixel_count()).for_each(consider),
        }
        best
    }
}

fn check_channels(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.channels != b.channels {
        return Err(Error::Dimension(format!(
            "feature channels differ: {} vs {}",
            a.channels, b.channels
        )));
    }
    Ok(())
}

/// Nearest style feature for every rendered feature.
pub fn nnfm_match(rendered: &FeatureMap, style: &FeatureMap) -> Result<MatchResult> {
    check_channels(rendered, style)?;
    if style.pixel_count() == 0 {
        return Err(Error::EmptyCandidates);
    }
    let index = StyleIndex::new(style);
    let pairs = par::map_range(rendered.pixel_count(), |p| {
        let v = rendered.vector(p);
        index.nearest(v, dot(v, v), None)
    });
    let degenerate = (0..rendered.pixel_count())
        .filter(|&p| rendered.vector(p).iter().all(|&x| x == 0.0))
        .count();
    if degenerate > 0 {
        log::debug!("{degenerate} rendered feature vectors have zero norm");
    }
    let (indices, distances) = pairs.into_iter().unzip();
    Ok(MatchResult {
        style_width: style.width,
        indices,
        distances,
        candidate_counts: BTreeMap::new(),
        fallback_pixels: 0,
        degenerate_pixels: degenerate,
    })
}

/// Inputs to semantic-aware matching. Every map must share spatial dims with
/// its mask.
#[derive(Clone, Copy)]
pub struct SemanticMatchInput<'a> {
    pub rendered_texture: &'a FeatureMap,
    pub rendered_semantic: &'a FeatureMap,
    pub style_texture: &'a FeatureMap,
    pub style_semantic: &'a FeatureMap,
    pub rendered_mask: &'a LabelMask,
    pub style_mask: &'a LabelMask,
    pub alpha: f64,
}

impl SemanticMatchInput<'_> {
    fn validate(&self) -> Result<()> {
        check_channels(self.rendered_texture, self.style_texture)?;
        check_channels(self.rendered_semantic, self.style_semantic)?;
        let same = |m: &FeatureMap, k: &LabelMask| m.height == k.height && m.width == k.width;
        if !same(self.rendered_texture, self.rendered_mask)
            || !same(self.rendered_semantic, self.rendered_mask)
            || !same(self.style_texture, self.style_mask)
            || !same(self.style_semantic, self.style_mask)
        {
            return Err(Error::Dimension(
                "semantic matching needs feature maps aligned with their masks".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if self.style_texture.pixel_count() == 0 {
            return Err(Error::EmptyCandidates);
        }
        Ok(())
    }
}

/// Prepared label-restricted blended search.
pub(crate) struct SemanticIndex<'a> {
    input: SemanticMatchInput<'a>,
    texture: StyleIndex<'a>,
    semantic_norms: Vec<f64>,
    candidates: BTreeMap<u32, Vec<usize>>,
}

impl<'a> SemanticIndex<'a> {
    pub(crate) fn new(input: SemanticMatchInput<'a>) -> Result<Self> {
        input.validate()?;
        let mut candidates: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (s, &l) in input.style_mask.labels.iter().enumerate() {
            candidates.entry(l).or_default().push(s);
        }
        Ok(Self {
            texture: StyleIndex::new(input.style_texture),
            semantic_norms: squared_norms(input.style_semantic),
            candidates,
            input,
        })
    }

    pub(crate) fn candidate_count(&self, label: u32) -> usize {
        self.candidates.get(&label).map_or(0, Vec::len)
    }

    /// Match for one content pixel; the flag reports a label fallback.
    pub(crate) fn nearest(&self, p: usize) -> (usize, f64, bool) {
        let inp = &self.input;
        let label = inp.rendered_mask.labels[p];
        let vt = inp.rendered_texture.vector(p);
        let nt = dot(vt, vt);
        let Some(cands) = self.candidates.get(&label) else {
            let (s, d) = self.texture.nearest(vt, nt, None);
            return (s, d, true);
        };
        let vs = inp.rendered_semantic.vector(p);
        let ns = dot(vs, vs);
        let alpha = inp.alpha;
        let mut best = (usize::MAX, f64::INFINITY);
        for &s in cands {
            let dt = cosine_distance_with_norms(vt, inp.style_texture.vector(s), nt, self.texture.norms[s]);
            let ds = cosine_distance_with_norms(vs, inp.style_semantic.vector(s), ns, self.semantic_norms[s]);
            let d = alpha * dt + (1.0 - alpha) * ds;
            if d < best.1 {
                best = (s, d);
            }
        }
        (best.0, best.1, false)
    }
}

/// Label-restricted, blended-distance nearest neighbour for every content pixel.
///
/// A content label with no style candidates falls back to unrestricted
/// texture-only matching for its pixels and reports a candidate count of zero.
pub fn sannfm_match(input: SemanticMatchInput<'_>) -> Result<MatchResult> {
    let index = SemanticIndex::new(input)?;
    let results = par::map_range(input.rendered_texture.pixel_count(), |p| index.nearest(p));
    let mut candidate_counts = BTreeMap::new();
    for l in input.rendered_mask.distinct_labels() {
        let n = index.candidate_count(l);
        if n == 0 {
            log::warn!("label {l} has no style candidates; falling back to texture-only matching");
        }
        candidate_counts.insert(l, n);
    }
    let fallback_pixels = results.iter().filter(|r| r.2).count();
    let degenerate = (0..input.rendered_texture.pixel_count())
        .filter(|&p| input.rendered_texture.vector(p).iter().all(|&x| x == 0.0))
        .count();
    Ok(MatchResult {
        style_width: input.style_texture.width,
        indices: results.iter().map(|r| r.0).collect(),
        distances: results.iter().map(|r| r.1).collect(),
        candidate_counts,
        fallback_pixels,
        degenerate_pixels: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feat::FeatureSpace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(), FeatureSpace::Texture)
            .unwrap()
    }

    fn random_mask(h: usize, w: usize, labels: u32, rng: &mut ChaCha8Rng) -> LabelMask {
        LabelMask::new(w, h, (0..h * w).map(|_| rng.random_range(0..labels)).collect()).unwrap()
    }

    #[test]
    fn cosine_distance_basics() {
        let v = [0.3, -1.2, 4.0];
        assert!(cosine_distance(&v, &v).unwrap() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector)));
    }

    #[test]
    fn unique_exact_copy_is_found() {
        // content pixel (0,0) = e0; style has e0 at (3,5) and e1 elsewhere
        let content = FeatureMap::new(1, 1, 2, vec![1.0, 0.0], FeatureSpace::Texture).unwrap();
        let (h, w) = (7, 6);
        let mut data = vec![];
        for y in 0..h {
            for x in 0..w {
                if (x, y) == (3, 5) {
                    data.extend([1.0, 0.0]);
                } else {
                    data.extend([0.0, 1.0]);
                }
            }
        }
        let style = FeatureMap::new(h, w, 2, data, FeatureSpace::Texture).unwrap();
        let m = nnfm_match(&content, &style).unwrap();
        assert_eq!(m.index_xy(0), (3, 5));
        assert_eq!(m.distances[0], 0.0);
    }

    #[test]
    fn single_pixel_maps() {
        let a = FeatureMap::new(1, 1, 3, vec![1.0, 2.0, 3.0], FeatureSpace::Texture).unwrap();
        let b = FeatureMap::new(1, 1, 3, vec![-1.0, 0.5, 2.0], FeatureSpace::Texture).unwrap();
        let m = nnfm_match(&a, &b).unwrap();
        assert_eq!(m.indices, vec![0]);
        assert_eq!(m.distances[0], cosine_distance(a.vector(0), b.vector(0)).unwrap());
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let a = FeatureMap::new(1, 1, 2, vec![1.0, 0.0], FeatureSpace::Texture).unwrap();
        let b = FeatureMap::new(1, 3, 2, vec![0.0, 1.0, 2.0, 0.0, 1.0, 0.0], FeatureSpace::Texture).unwrap();
        assert_eq!(nnfm_match(&a, &b).unwrap().indices, vec![1]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let a = FeatureMap::zeros(2, 2, 3, FeatureSpace::Texture);
        let b = FeatureMap::zeros(2, 2, 4, FeatureSpace::Texture);
        assert!(matches!(nnfm_match(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_norm_content_gets_maximal_distance() {
        let a = FeatureMap::zeros(1, 2, 2, FeatureSpace::Texture);
        let b = FeatureMap::new(1, 1, 2, vec![1.0, 0.0], FeatureSpace::Texture).unwrap();
        let m = nnfm_match(&a, &b).unwrap();
        assert_eq!(m.distances, vec![2.0, 2.0]);
        assert_eq!(m.degenerate_pixels, 2);
    }

    #[test]
    fn singleton_candidate_wins_regardless_of_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rt = random_map(2, 2, 4, &mut rng);
        let rs = random_map(2, 2, 3, &mut rng);
        let st = random_map(3, 3, 4, &mut rng);
        let ss = random_map(3, 3, 3, &mut rng);
        let rm = LabelMask::uniform(2, 2, 2);
        let mut sl = vec![0; 9];
        sl[7] = 2;
        let sm = LabelMask::new(3, 3, sl).unwrap();
        let m = sannfm_match(SemanticMatchInput {
            rendered_texture: &rt,
            rendered_semantic: &rs,
            style_texture: &st,
            style_semantic: &ss,
            rendered_mask: &rm,
            style_mask: &sm,
            alpha: 0.5,
        })
        .unwrap();
        assert!(m.indices.iter().all(|&i| i == 7));
        assert_eq!(m.candidate_counts[&2], 1);
    }

    #[test]
    fn missing_style_label_falls_back_to_texture_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rt = random_map(3, 3, 4, &mut rng);
        let rs = random_map(3, 3, 3, &mut rng);
        let st = random_map(4, 4, 4, &mut rng);
        let ss = random_map(4, 4, 3, &mut rng);
        let rm = LabelMask::uniform(3, 3, 5);
        let sm = LabelMask::uniform(4, 4, 0);
        let m = sannfm_match(SemanticMatchInput {
            rendered_texture: &rt,
            rendered_semantic: &rs,
            style_texture: &st,
            style_semantic: &ss,
            rendered_mask: &rm,
            style_mask: &sm,
            alpha: 0.3,
        })
        .unwrap();
        assert_eq!(m.candidate_counts[&5], 0);
        assert_eq!(m.fallback_pixels, 9);
        assert_eq!(m.indices, nnfm_match(&rt, &st).unwrap().indices);
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let f = FeatureMap::zeros(1, 1, 1, FeatureSpace::Texture);
        let k = LabelMask::uniform(1, 1, 0);
        let r = sannfm_match(SemanticMatchInput {
            rendered_texture: &f,
            rendered_semantic: &f,
            style_texture: &f,
            style_semantic: &f,
            rendered_mask: &k,
            style_mask: &k,
            alpha: 1.5,
        });
        assert!(r.is_err());
    }

    #[test]
    fn semantic_matching_equals_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let (h, w, sh, sw) = (4, 5, 3, 6);
            let rt = random_map(h, w, 3, &mut rng);
            let rs = random_map(h, w, 2, &mut rng);
            let st = random_map(sh, sw, 3, &mut rng);
            let ss = random_map(sh, sw, 2, &mut rng);
            let rm = random_mask(h, w, 3, &mut rng);
            let sm = random_mask(sh, sw, 3, &mut rng);
            let alpha = rng.random_range(0.0..1.0);
            let input = SemanticMatchInput {
                rendered_texture: &rt,
                rendered_semantic: &rs,
                style_texture: &st,
                style_semantic: &ss,
                rendered_mask: &rm,
                style_mask: &sm,
                alpha,
            };
            let got = sannfm_match(input).unwrap();
            for p in 0..h * w {
                let mut best = (usize::MAX, f64::INFINITY);
                for s in 0..sh * sw {
                    if sm.labels[s] != rm.labels[p] {
                        continue;
                    }
                    let d = alpha * cosine_distance(rt.vector(p), st.vector(s)).unwrap()
                        + (1.0 - alpha) * cosine_distance(rs.vector(p), ss.vector(s)).unwrap();
                    if d < best.1 {
                        best = (s, d);
                    }
                }
                if best.0 == usize::MAX {
                    for s in 0..sh * sw {
                        let d = cosine_distance(rt.vector(p), st.vector(s)).unwrap();
                        if d < best.1 {
                            best = (s, d);
                        }
                    }
                }
                assert_eq!(got.indices[p], best.0);
            }
        }
    }
}
