//! Label masks from per-pixel semantic features, queried either by example
//! pixels or by label embeddings.

use crate::error::{Error, Result};
use crate::feat::FeatureMap;
use crate::image::LabelMask;
use crate::matching::{cosine_distance_with_norms, dot};
use crate::par;

/// Distance threshold for single-pixel queries.
pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedding {
    pub label: u32,
    pub name: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingSet {
    labels: Vec<LabelEmbedding>,
}

impl LabelEmbeddingSet {
    pub fn new(labels: Vec<LabelEmbedding>) -> Result<Self> {
        let Some(first) = labels.first() else {
            return Err(Error::invalid("embeddings", "at least one label embedding is required"));
        };
        let dim = first.embedding.len();
        for l in &labels {
            if l.embedding.len() != dim {
                return Err(Error::Dimension("label embeddings differ in length".into()));
            }
            if dot(&l.embedding, &l.embedding) == 0.0 || l.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("embeddings", format!("embedding for label {} is degenerate", l.label)));
            }
        }
        Ok(Self { labels })
    }

    /// Rows of a `[M, C]` matrix become labels `0..M`.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64], names: Option<Vec<String>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension("embedding matrix size mismatch".into()));
        }
        if let Some(n) = &names {
            if n.len() != rows {
                return Err(Error::Dimension("one name per embedding row is required".into()));
            }
        }
        Self::new(
            (0..rows)
                .map(|r| LabelEmbedding {
                    label: r as u32,
                    name: names.as_ref().map_or_else(|| format!("label{r}"), |n| n[r].clone()),
                    embedding: data[r * cols..(r + 1) * cols].to_vec(),
                })
                .collect(),
        )
    }

    pub fn labels(&self) -> &[LabelEmbedding] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels[0].embedding.len()
    }
}

/// Assigns each pixel the label of the closest reference vector. Ties go to
/// the reference with the smallest label id; a zero-norm pixel gets the first
/// such reference.
fn argmin_labels(sem: &FeatureMap, refs: &[(u32, Vec<f64>)]) -> Vec<u32> {
    let norms: Vec<f64> = refs.iter().map(|(_, v)| dot(v, v)).collect();
    par::map_range(sem.pixel_count(), |p| {
        let f = sem.vector(p);
        let nf = dot(f, f);
        let mut best = (f64::INFINITY, u32::MAX);
        for ((label, r), &nr) in refs.iter().zip(&norms) {
            let d = cosine_distance_with_norms(f, r, nf, nr);
            if d < best.0 || (d == best.0 && *label < best.1) {
                best = (d, *label);
            }
        }
        best.1
    })
}

/// Pixel-query masks. One query gives a binary mask thresholded at `tau`;
/// several queries give a per-pixel argmin over the query features.
pub fn mask_from_pixel_query(sem: &FeatureMap, queries: &[(usize, usize, u32)], tau: f64) -> Result<LabelMask> {
    let refs = query_features(sem, queries)?;
    mask_from_query_features(sem, &refs, tau)
}

/// Reads the feature vectors under the query pixels.
pub fn query_features(sem: &FeatureMap, queries: &[(usize, usize, u32)]) -> Result<Vec<(u32, Vec<f64>)>> {
    if queries.is_empty() {
        return Err(Error::invalid("queries", "at least one query pixel is required"));
    }
    queries
        .iter()
        .map(|&(x, y, label)| {
            if x >= sem.width || y >= sem.height {
                return Err(Error::invalid("query", format!("pixel ({x}, {y}) outside {}x{}", sem.width, sem.height)));
            }
            let v = sem.vector(y * sem.width + x).to_vec();
            if dot(&v, &v) == 0.0 {
                return Err(Error::DegenerateQuery { x, y });
            }
            Ok((label, v))
        })
        .collect()
}

/// Query by feature vectors taken from another view.
pub fn mask_from_query_features(sem: &FeatureMap, refs: &[(u32, Vec<f64>)], tau: f64) -> Result<LabelMask> {
    if refs.is_empty() {
        return Err(Error::invalid("queries", "at least one query is required"));
    }
    for (_, r) in refs {
        if r.len() != sem.channels {
            return Err(Error::Dimension(format!("query has {} channels, map has {}", r.len(), sem.channels)));
        }
    }
    let labels = if let [(_, r)] = refs {
        let nr = dot(r, r);
        par::map_range(sem.pixel_count(), |p| {
            let f = sem.vector(p);
            u32::from(cosine_distance_with_norms(f, r, dot(f, f), nr) <= tau)
        })
    } else {
        argmin_labels(sem, refs)
    };
    LabelMask::new(sem.width, sem.height, labels)
}

pub fn mask_from_embeddings(sem: &FeatureMap, embeddings: &LabelEmbeddingSet) -> Result<LabelMask> {
    if embeddings.dim() != sem.channels {
        return Err(Error::Dimension(format!(
            "embeddings have {} channels, semantic features have {}",
            embeddings.dim(),
            sem.channels
        )));
    }
    let refs: Vec<(u32, Vec<f64>)> = embeddings.labels.iter().map(|l| (l.label, l.embedding.clone())).collect();
    LabelMask::new(sem.width, sem.height, argmin_labels(sem, &refs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feat::FeatureSpace;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_region() -> FeatureMap {
        let (h, w) = (4, 6);
        let mut data = Vec::new();
        for _y in 0..h {
            for x in 0..w {
                data.extend(if x < 3 { [1.0, 0.0, 0.0] } else { [0.0, 2.0, 0.0] });
            }
        }
        FeatureMap::new(h, w, 3, data, FeatureSpace::Semantic).unwrap()
    }

    fn region_truth() -> Vec<u32> {
        (0..24).map(|p| u32::from(p % 6 >= 3)).collect()
    }

    fn random_map(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(), FeatureSpace::Semantic).unwrap()
    }

    fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - ab / (na * nb)
    }

    #[test]
    fn orthogonal_regions_from_two_queries() {
        let m = mask_from_pixel_query(&two_region(), &[(0, 0, 0), (5, 3, 1)], DEFAULT_TAU).unwrap();
        assert_eq!(m.labels, region_truth());
    }

    #[test]
    fn single_query_on_constant_map_selects_everything() {
        let sem = FeatureMap::new(3, 3, 2, [0.3, 0.7].repeat(9), FeatureSpace::Semantic).unwrap();
        let m = mask_from_pixel_query(&sem, &[(1, 1, 1)], DEFAULT_TAU).unwrap();
        assert!(m.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn single_query_thresholds_regions() {
        let m = mask_from_pixel_query(&two_region(), &[(4, 1, 1)], DEFAULT_TAU).unwrap();
        assert_eq!(m.labels, region_truth());
    }

    #[test]
    fn zero_query_feature_is_degenerate() {
        let mut sem = two_region();
        sem.vector_mut(7).fill(0.0);
        assert!(matches!(
            mask_from_pixel_query(&sem, &[(1, 1, 0)], DEFAULT_TAU),
            Err(Error::DegenerateQuery { x: 1, y: 1 })
        ));
        assert!(mask_from_pixel_query(&sem, &[(6, 0, 0)], DEFAULT_TAU).is_err());
        assert!(mask_from_pixel_query(&sem, &[], DEFAULT_TAU).is_err());
    }

    #[test]
    fn noisy_clusters_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (7, 9);
        let centers = [[1.0, 0.2, 0.0, 0.1], [0.0, 0.1, 1.0, 0.3]];
        let mut data = Vec::new();
        for p in 0..h * w {
            let c = centers[usize::from(rng.random_bool(0.5)) ^ (p % 2)];
            data.extend(c.iter().map(|v| v + rng.random_range(-0.4..0.4)));
        }
        let sem = FeatureMap::new(h, w, 4, data, FeatureSpace::Semantic).unwrap();
        let queries = [(0, 0, 0), (4, 3, 1)];
        let m = mask_from_pixel_query(&sem, &queries, DEFAULT_TAU).unwrap();
        for p in 0..h * w {
            let d0 = brute_cos(sem.vector(p), sem.vector(0));
            let d1 = brute_cos(sem.vector(p), sem.vector(3 * w + 4));
            assert_eq!(m.labels[p], if d1 < d0 { 1 } else { 0 });
        }
    }

    #[test]
    fn embeddings_reproduce_regions() {
        let set = LabelEmbeddingSet::from_rows(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], None).unwrap();
        assert_eq!(mask_from_embeddings(&two_region(), &set).unwrap().labels, region_truth());
        let single = LabelEmbeddingSet::from_rows(1, 3, &[0.0, 0.0, 1.0], None).unwrap();
        assert!(mask_from_embeddings(&two_region(), &single).unwrap().labels.iter().all(|&l| l == 0));
        let wrong = LabelEmbeddingSet::from_rows(1, 2, &[1.0, 0.0], None).unwrap();
        assert!(matches!(mask_from_embeddings(&two_region(), &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn degenerate_embeddings_rejected() {
        assert!(LabelEmbeddingSet::from_rows(1, 2, &[0.0, 0.0], None).is_err());
        assert!(LabelEmbeddingSet::from_rows(0, 2, &[], None).is_err());
    }

    #[test]
    fn random_embeddings_match_brute_force() {
        let sem = random_map(11, 6, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let set = LabelEmbeddingSet::from_rows(3, 5, &rows, None).unwrap();
        let m = mask_from_embeddings(&sem, &set).unwrap();
        for p in 0..36 {
            let mut best = (f64::INFINITY, 0);
            for l in 0..3 {
                let d = brute_cos(sem.vector(p), &rows[l * 5..l * 5 + 5]);
                if d < best.0 {
                    best = (d, l as u32);
                }
            }
            assert_eq!(m.labels[p], best.1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn positive_scaling_keeps_mask(seed in 0u64..1000, s in 0.01f64..100.0, which in 0usize..3) {
            let sem = random_map(seed, 5, 4, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let rows: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = mask_from_embeddings(&sem, &LabelEmbeddingSet::from_rows(3, 4, &rows, None).unwrap()).unwrap();
            let mut scaled = rows.clone();
            scaled[which * 4..which * 4 + 4].iter_mut().for_each(|v| *v *= s);
            let m = mask_from_embeddings(&sem, &LabelEmbeddingSet::from_rows(3, 4, &scaled, None).unwrap()).unwrap();
            prop_assert_eq!(&m.labels, &base.labels);
            let mut sem2 = sem.clone();
            sem2.vector_mut(which).iter_mut().for_each(|v| *v *= s);
            let rows_set = LabelEmbeddingSet::from_rows(3, 4, &rows, None).unwrap();
            prop_assert_eq!(mask_from_embeddings(&sem2, &rows_set).unwrap().labels, base.labels);
        }

        #[test]
        fn permuting_embeddings_relabels(seed in 0u64..1000) {
            let sem = random_map(seed, 4, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let perm = [2u32, 0, 1];
            let a = LabelEmbeddingSet::new((0..3).map(|i| LabelEmbedding { label: i as u32, name: String::new(), embedding: rows[i].clone() }).collect()).unwrap();
            let b = LabelEmbeddingSet::new((0..3).rev().map(|i| LabelEmbedding { label: perm[i], name: String::new(), embedding: rows[i].clone() }).collect()).unwrap();
            let ma = mask_from_embeddings(&sem, &a).unwrap();
            let mb = mask_from_embeddings(&sem, &b).unwrap();
            for p in 0..16 {
                prop_assert_eq!(mb.labels[p], perm[ma.labels[p] as usize]);
            }
        }
    }
}
