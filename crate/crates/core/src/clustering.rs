//! Turning rendered embeddings into discrete instance IDs: DBSCAN-style
//! clustering per semantic class, a centroid cache, and nearest-centroid
//! assignment.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::fields::{Branch, Fields, ParamStore};
use crate::geometry::dist2;
use crate::image::LabelMap;
use crate::rendering::{
    march, render_instance, render_semantic, Camera, InstanceWork, MarchConfig, SampleMode,
    SemanticWork,
};

/// Core-point threshold cap. The default radius is the median distance to the
/// `DEFAULT_K`-th neighbour, so a larger threshold would leave most points
/// non-core.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSample {
    pub embedding: Vec<f64>,
    pub class: u32,
    pub view: usize,
    pub pixel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    /// Cluster index per point, -1 for noise.
    pub labels: Vec<i64>,
    /// Sorted lexicographically; `labels` index into this list.
    pub centroids: Vec<Vec<f64>>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map_or(0, Vec::len);
    for p in points {
        if p.len() != dim {
            return Err(LiftError::DimensionMismatch(format!(
                "embedding of length {} among length-{dim} embeddings",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(LiftError::Config("embedding has non-finite components".into()));
        }
    }
    Ok(dim)
}

/// Fixed-radius neighbour queries over points sorted by their first coordinate.
struct Sweep<'a> {
    points: &'a [Vec<f64>],
    order: Vec<usize>,
    key: Vec<f64>,
}

impl<'a> Sweep<'a> {
    fn new(points: &'a [Vec<f64>]) -> Self {
        let first = |i: usize| points[i].first().copied().unwrap_or(0.0);
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| first(a).total_cmp(&first(b)));
        let key = order.iter().map(|&i| first(i)).collect();
        Sweep { points, order, key }
    }

    /// Calls `f(j, d²)` for every j (including i) with |x_i - x_j| ≤ eps.
    fn for_neighbors(&self, i: usize, eps: f64, mut f: impl FnMut(usize, f64)) {
        let x0 = self.points[i].first().copied().unwrap_or(0.0);
        let lo = self.key.partition_point(|&k| k < x0 - eps);
        let eps2 = eps * eps;
        for (&k, &j) in self.key[lo..].iter().zip(&self.order[lo..]) {
            if k > x0 + eps {
                break;
            }
            let d = dist2(&self.points[i], &self.points[j]);
            if d <= eps2 {
                f(j, d);
            }
        }
    }
}

/// Median over points of the distance to their k-th nearest other point.
/// None with fewer than k + 1 points.
pub fn knn_radius(points: &[Vec<f64>], k: usize) -> Result<Option<f64>> {
    check_points(points)?;
    if k == 0 || points.len() <= k {
        return Ok(None);
    }
    let mut kth = Vec::with_capacity(points.len());
    let mut d = Vec::with_capacity(points.len());
    for p in points {
        d.clear();
        d.extend(points.iter().map(|q| dist2(p, q)));
        // index 0 after selection is the point itself (distance 0)
        let (_, v, _) = d.select_nth_unstable_by(k, f64::total_cmp);
        kth.push(v.sqrt());
    }
    let mid = kth.len() / 2;
    let (_, m, _) = kth.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(Some(*m))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[a.max(b)] = a.min(b);
        }
    }
}

/// DBSCAN: points with at least `min(min_cluster_size, DEFAULT_K)` points
/// (themselves included) within `eps` are core; connected core points form a
/// cluster; a border point joins the cluster of its nearest core neighbour.
/// Clusters smaller than `min_cluster_size` dissolve into noise.
///
/// The partition does not depend on input order, and centroids (member means,
/// summed in sorted order) are bit-identical under permutation.
pub fn density_cluster(points: &[Vec<f64>], min_cluster_size: usize, eps: f64) -> Result<Clusters> {
    if min_cluster_size == 0 || !(eps > 0.0) || !eps.is_finite() {
        return Err(LiftError::Config(format!(
            "clustering needs min_cluster_size >= 1 and a positive radius (got {min_cluster_size}, {eps})"
        )));
    }
    let dim = check_points(points)?;
    let n = points.len();
    let sweep = Sweep::new(points);
    let min_pts = min_cluster_size.min(DEFAULT_K);
    let core: Vec<bool> = (0..n)
        .map(|i| {
            let mut c = 0;
            sweep.for_neighbors(i, eps, |_, _| c += 1);
            c >= min_pts
        })
        .collect();
    let mut uf = UnionFind((0..n).collect());
    for i in (0..n).filter(|&i| core[i]) {
        sweep.for_neighbors(i, eps, |j, _| {
            if core[j] {
                uf.union(i, j);
            }
        });
    }
    let mut root = vec![usize::MAX; n];
    for i in 0..n {
        if core[i] {
            root[i] = uf.find(i);
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        sweep.for_neighbors(i, eps, |j, d| {
            if !core[j] {
                return;
            }
            let better = match best {
                None => true,
                Some((bd, bj)) => match d.total_cmp(&bd) {
                    Ordering::Less => true,
                    Ordering::Equal => lex_cmp(&points[j], &points[bj]) == Ordering::Less,
                    Ordering::Greater => false,
                },
            };
            if better {
                best = Some((d, j));
            }
        });
        if let Some((_, j)) = best {
            root[i] = uf.find(j);
        }
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in root.iter().enumerate() {
        if r != usize::MAX {
            members.entry(r).or_default().push(i);
        }
    }
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = members
        .into_values()
        .filter(|m| m.len() >= min_cluster_size)
        .map(|mut m| {
            m.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]));
            let mut c = vec![0.0; dim];
            for &i in &m {
                for (ck, pk) in c.iter_mut().zip(&points[i]) {
                    *ck += pk;
                }
            }
            for ck in &mut c {
                *ck /= m.len() as f64;
            }
            (c, m)
        })
        .collect();
    groups.sort_by(|a, b| lex_cmp(&a.0, &b.0));
    let mut labels = vec![-1i64; n];
    let mut centroids = Vec::with_capacity(groups.len());
    for (k, (c, m)) in groups.into_iter().enumerate() {
        for i in m {
            labels[i] = k as i64;
        }
        centroids.push(c);
    }
    Ok(Clusters { labels, centroids })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Centroid {
    pub id: u32,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCentroids {
    pub class: u32,
    pub centroids: Vec<Centroid>,
}

/// Per-class centroids with globally unique instance IDs (starting at 1).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidCache {
    pub dim: usize,
    pub classes: Vec<ClassCentroids>,
}

impl CentroidCache {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        let mut classes = std::collections::HashSet::new();
        for c in &self.classes {
            if !classes.insert(c.class) {
                return Err(LiftError::Config(format!("class {} listed twice", c.class)));
            }
            for (k, e) in c.centroids.iter().enumerate() {
                if e.id == 0 || !ids.insert(e.id) {
                    return Err(LiftError::Config(format!("instance ID {} is reserved or repeated", e.id)));
                }
                if e.centroid.len() != self.dim || e.centroid.iter().any(|v| !v.is_finite()) {
                    return Err(LiftError::DimensionMismatch(format!(
                        "centroid {} must have {} finite components",
                        e.id, self.dim
                    )));
                }
                if c.centroids[..k].iter().any(|o| o.centroid == e.centroid) {
                    return Err(LiftError::Config(format!(
                        "class {} has duplicate centroids",
                        c.class
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class(&self, class: u32) -> Option<&[Centroid]> {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .map(|c| c.centroids.as_slice())
    }

    pub fn num_instances(&self) -> usize {
        self.classes.iter().map(|c| c.centroids.len()).sum()
    }

    /// Nearest centroid of `class`, ties to the lowest ID; 0 when the class
    /// has no centroids.
    pub fn lookup(&self, embedding: &[f64], class: u32) -> u32 {
        let Some(cs) = self.class(class) else { return 0 };
        let mut best = (f64::INFINITY, 0u32);
        for c in cs {
            let d = dist2(embedding, &c.centroid);
            if d < best.0 || (d == best.0 && c.id < best.1) {
                best = (d, c.id);
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub min_cluster_size: usize,
    /// Per-class overrides of `min_cluster_size`.
    pub class_min_sizes: BTreeMap<u32, usize>,
    /// Neighbourhood radius; None uses `eps_scale` times [`knn_radius`] with
    /// [`DEFAULT_K`].
    pub eps: Option<f64>,
    /// Small sparse clusters lose their core points below about 2.25; in 8-D,
    /// blobs ten widths apart start to merge above about 3.
    pub eps_scale: f64,
    /// Stuff class excluded from instance clustering.
    pub background_class: Option<u32>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            min_cluster_size: 10,
            class_min_sizes: BTreeMap::new(),
            eps: None,
            eps_scale: 2.5,
            background_class: Some(crate::scenegen::BACKGROUND_CLASS),
        }
    }
}

impl ClusterConfig {
    pub fn min_size(&self, class: u32) -> usize {
        self.class_min_sizes
            .get(&class)
            .copied()
            .unwrap_or(self.min_cluster_size)
    }

    /// The radius used for `samples`: the configured one or the k-NN median.
    pub fn radius(&self, samples: &[EmbeddingSample]) -> Result<f64> {
        if let Some(e) = self.eps {
            return Ok(e);
        }
        if !(self.eps_scale > 0.0) {
            return Err(LiftError::Config("eps_scale must be positive".into()));
        }
        let pts: Vec<Vec<f64>> = samples.iter().map(|s| s.embedding.clone()).collect();
        // degenerate sets (everything identical, or too few points) get a tiny radius
        Ok(knn_radius(&pts, DEFAULT_K)?
            .map(|r| r * self.eps_scale)
            .filter(|&r| r > 0.0)
            .unwrap_or(1e-9))
    }
}

/// Groups samples by semantic class, clusters each group and numbers the
/// centroids 1, 2, ... in (class, lexicographic centroid) order.
pub fn hierarchical_cluster(samples: &[EmbeddingSample], config: &ClusterConfig) -> Result<CentroidCache> {
    let dim = samples.first().map_or(0, |s| s.embedding.len());
    let eps = config.radius(samples)?;
    let mut groups: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples {
        if s.embedding.len() != dim {
            return Err(LiftError::DimensionMismatch("embedding sizes differ".into()));
        }
        if Some(s.class) != config.background_class {
            groups.entry(s.class).or_default().push(s.embedding.clone());
        }
    }
    let mut cache = CentroidCache {
        dim,
        classes: Vec::new(),
    };
    let mut next = 1u32;
    for (class, points) in groups {
        let clusters = density_cluster(&points, config.min_size(class), eps)?;
        let centroids = clusters
            .centroids
            .into_iter()
            .map(|centroid| {
                let id = next;
                next += 1;
                Centroid { id, centroid }
            })
            .collect();
        cache.classes.push(ClassCentroids { class, centroids });
    }
    Ok(cache)
}

/// Per-pixel nearest-centroid labels. `embeddings` is row-major
/// `width * height * cache.dim`; pixels whose class has no centroids
/// (including the background class) get 0.
pub fn assign_labels(
    width: usize,
    height: usize,
    embeddings: &[f64],
    classes: &[u32],
    cache: &CentroidCache,
) -> Result<LabelMap> {
    let n = width * height;
    if classes.len() != n || embeddings.len() != n * cache.dim {
        return Err(LiftError::LengthMismatch {
            expected: n * cache.dim,
            actual: embeddings.len(),
        });
    }
    let data = (0..n)
        .map(|p| {
            let e = &embeddings[p * cache.dim..(p + 1) * cache.dim];
            cache.lookup(e, classes[p])
        })
        .collect();
    LabelMap::from_vec(width, height, data)
}

/// Picks the candidate whose cache scores highest; ties go to the smallest
/// candidate.
pub fn tune_min_cluster_size(
    samples: &[EmbeddingSample],
    candidates: &[usize],
    config: &ClusterConfig,
    mut score: impl FnMut(&CentroidCache) -> Result<f64>,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(LiftError::Config("no min_cluster_size candidates".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok(sorted[0]);
    }
    let eps = config.radius(samples)?;
    let mut best: Option<(f64, usize)> = None;
    for m in sorted {
        let cfg = ClusterConfig {
            min_cluster_size: m,
            class_min_sizes: BTreeMap::new(),
            eps: Some(eps),
            eps_scale: config.eps_scale,
            background_class: config.background_class,
        };
        let s = score(&hierarchical_cluster(samples, &cfg)?)?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, m));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or(candidates[0]))
}

/// What a trained field says about one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub embedding: Vec<f64>,
    /// argmax of the rendered class distribution; `background` where the
    /// opacity is at most 0.5
    pub class: u32,
    pub opacity: f64,
}

/// Scratch space reused across [`pixel_features`] calls.
#[derive(Debug, Clone, Default)]
pub struct FeatureWork {
    instance: InstanceWork,
    semantic: SemanticWork,
}

pub fn pixel_features(
    fields: &Fields,
    store: &ParamStore,
    camera: &Camera,
    pixel: usize,
    march_cfg: &MarchConfig,
    background: u32,
    work: &mut FeatureWork,
) -> PixelFeatures {
    let ray = camera.pixel_center_ray(pixel % camera.width, pixel / camera.width);
    let compact = march(fields, store, &ray, march_cfg, SampleMode::Uniform).compact();
    let opacity = compact.opacity();
    let embedding = render_instance(fields, store, Branch::Fast, &compact, &mut work.instance);
    let mut class = background;
    if opacity > 0.5 {
        if let Some(p) = render_semantic(fields, store, &compact, &mut work.semantic) {
            let mut best = 0;
            for (c, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = c;
                }
            }
            class = best as u32;
        }
    }
    PixelFeatures {
        embedding,
        class,
        opacity,
    }
}

/// Renders the fast embedding and class at `n_pixels` uniformly drawn pixels
/// of `n_views` cameras and keeps the non-background ones. Views are drawn
/// without replacement when there are enough cameras.
#[allow(clippy::too_many_arguments)]
pub fn build_sample_set(
    fields: &Fields,
    store: &ParamStore,
    cameras: &[Camera],
    n_pixels: usize,
    n_views: usize,
    march_cfg: &MarchConfig,
    background: u32,
    rng: &mut impl Rng,
) -> Result<Vec<EmbeddingSample>> {
    if n_pixels == 0 {
        return Ok(Vec::new());
    }
    if cameras.is_empty() || n_views == 0 {
        return Err(LiftError::Config("sampling needs at least one camera and view".into()));
    }
    let views: Vec<usize> = if n_views <= cameras.len() {
        let mut v = index::sample(rng, cameras.len(), n_views).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n_views).map(|_| rng.random_range(0..cameras.len())).collect()
    };
    let mut picks: Vec<(usize, usize)> = (0..n_pixels)
        .map(|_| {
            let v = views[rng.random_range(0..views.len())];
            (v, rng.random_range(0..cameras[v].num_pixels()))
        })
        .collect();
    picks.sort_unstable();
    let mut work = FeatureWork::default();
    let mut out = Vec::new();
    for (view, pixel) in picks {
        let f = pixel_features(fields, store, &cameras[view], pixel, march_cfg, background, &mut work);
        if f.class != background {
            out.push(EmbeddingSample {
                embedding: f.embedding,
                class: f.class,
                view,
                pixel,
            });
        }
    }
    Ok(out)
}
