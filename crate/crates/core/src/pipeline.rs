//! End-to-end glue: synthetic data, training inputs, centroid caches, label
//! rendering and evaluation. Both the command-line tool and the acceptance
//! tests go through here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    assign_labels, build_sample_set, hierarchical_cluster, pixel_features, tune_min_cluster_size,
    CentroidCache, ClusterConfig, FeatureWork,
};
use crate::error::{LiftError, Result};
use crate::fields::{Fields, ParamStore};
use crate::geometry::Vec3;
use crate::image::{DepthMap, Image, LabelMap};
use crate::io::{Dataset, DatasetFrame};
use crate::metrics::{mean_pq_frame, miou, pq_scene, psnr, Frame, PqReport};
use crate::rendering::{march, render_color, Camera, ColorWork, MarchConfig, SampleMode};
use crate::scenegen::{
    corrupt_labels, make_scene, render_gt, GtFrame, NoiseOpts, Scene, SceneConfig, BACKGROUND_CLASS,
};
use crate::seeds;
use crate::training::{TrainData, TrainView};

/// A generated scene with exact renders and corrupted instance labels.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub gt: Vec<GtFrame>,
    pub noisy: Vec<LabelMap>,
}

pub fn synthesize(scene: &SceneConfig, noise: &NoiseOpts) -> Result<Synthetic> {
    let (s, cameras) = make_scene(scene)?;
    let gt: Vec<GtFrame> = cameras.iter().map(|c| render_gt(&s, c)).collect();
    let instances: Vec<LabelMap> = gt.iter().map(|f| f.instance.clone()).collect();
    let noisy = corrupt_labels(&instances, noise)?;
    Ok(Synthetic {
        scene: s,
        cameras,
        gt,
        noisy,
    })
}

impl Synthetic {
    pub fn train_data(&self) -> TrainData {
        self.train_data_with(&self.noisy)
    }

    /// Training inputs with `instances` as the 2D instance labels.
    pub fn train_data_with(&self, instances: &[LabelMap]) -> TrainData {
        let views = self
            .cameras
            .iter()
            .zip(&self.gt)
            .zip(instances)
            .map(|((c, f), inst)| TrainView {
                camera: c.clone(),
                rgb: (0..f.rgb.data.len()).map(|i| f.rgb.pixel_f64(i)).collect(),
                semantic: f.semantic.data.clone(),
                instance: inst.data.clone(),
            })
            .collect();
        TrainData {
            views,
            num_classes: self.scene.num_classes,
            background_class: BACKGROUND_CLASS,
        }
    }

    pub fn dataset_frames(&self) -> Vec<DatasetFrame> {
        self.gt
            .iter()
            .zip(&self.noisy)
            .map(|(f, n)| DatasetFrame {
                rgb: f.rgb.clone(),
                instance_gt: Some(f.instance.clone()),
                instance_noisy: Some(n.clone()),
                semantic: Some(f.semantic.clone()),
                depth: Some(f.depth.clone()),
            })
            .collect()
    }

    pub fn gt_instances(&self) -> Vec<LabelMap> {
        self.gt.iter().map(|f| f.instance.clone()).collect()
    }

    pub fn depths(&self) -> Vec<DepthMap> {
        self.gt.iter().map(|f| f.depth.clone()).collect()
    }
}

/// Training inputs from a dataset directory: RGB, semantic maps and the noisy
/// instance labels.
pub fn train_data_from_dataset(ds: &Dataset, num_classes: usize) -> Result<TrainData> {
    let mut views = Vec::with_capacity(ds.len());
    for (i, camera) in ds.cameras.iter().enumerate() {
        let rgb = ds.rgb(i)?;
        let semantic = ds.semantic(i)?;
        let instance = ds.instance_noisy(i)?;
        views.push(TrainView {
            camera: camera.clone(),
            rgb: (0..rgb.data.len()).map(|p| rgb.pixel_f64(p)).collect(),
            semantic: semantic.data,
            instance: instance.data,
        });
    }
    Ok(TrainData {
        views,
        num_classes,
        background_class: BACKGROUND_CLASS,
    })
}

/// Everything a trained field renders for one view.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub width: usize,
    pub height: usize,
    /// Row-major, `embed_dim` values per pixel.
    pub embeddings: Vec<f64>,
    pub classes: Vec<u32>,
    pub opacity: Vec<f64>,
}

impl ViewRender {
    pub fn semantic_map(&self) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            data: self.classes.clone(),
        }
    }
}

pub fn render_view(
    fields: &Fields,
    store: &ParamStore,
    camera: &Camera,
    march_cfg: &MarchConfig,
    background: u32,
) -> ViewRender {
    let feats: Vec<_> = (0..camera.num_pixels())
        .into_par_iter()
        .map_init(FeatureWork::default, |work, p| {
            pixel_features(fields, store, camera, p, march_cfg, background, work)
        })
        .collect();
    let mut out = ViewRender {
        width: camera.width,
        height: camera.height,
        embeddings: Vec::with_capacity(feats.len() * fields.embed_dim()),
        classes: Vec::with_capacity(feats.len()),
        opacity: Vec::with_capacity(feats.len()),
    };
    for f in feats {
        out.embeddings.extend_from_slice(&f.embedding);
        out.classes.push(f.class);
        out.opacity.push(f.opacity);
    }
    out
}

/// Color image rendered with the training-time march settings.
pub fn render_rgb(fields: &Fields, store: &ParamStore, camera: &Camera, march_cfg: &MarchConfig) -> Vec<Vec3> {
    (0..camera.num_pixels())
        .into_par_iter()
        .map_init(ColorWork::default, |work, p| {
            let ray = camera.pixel_center_ray(p % camera.width, p / camera.width);
            let m = march(fields, store, &ray, march_cfg, SampleMode::Uniform);
            let c = render_color(fields, store, &m, work);
            [c[0], c[1], c[2]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Pixels drawn for clustering (before dropping the background).
    pub sample_pixels: usize,
    pub sample_views: usize,
    /// Fraction of the views used to score min_cluster_size candidates.
    pub tune_fraction: f64,
    /// Candidates for min_cluster_size; a single entry skips the sweep.
    pub min_cluster_sizes: Vec<usize>,
    pub cluster: ClusterConfig,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            sample_pixels: 10_000,
            sample_views: 20,
            tune_fraction: 0.1,
            min_cluster_sizes: vec![5, 10, 20, 40, 80],
            cluster: ClusterConfig::default(),
            seed: 0,
        }
    }
}

/// The 2D labels a field was trained on, used to score the sweep.
pub struct Supervision<'a> {
    pub instances: &'a [LabelMap],
    pub semantics: &'a [LabelMap],
}

#[derive(Debug, Clone)]
pub struct CacheResult {
    pub cache: CentroidCache,
    pub min_cluster_size: usize,
    pub samples: usize,
}

/// Samples embeddings, picks min_cluster_size by per-frame PQ against the
/// training labels on a subset of views, and clusters.
pub fn build_cache(
    fields: &Fields,
    store: &ParamStore,
    cameras: &[Camera],
    labels: &Supervision,
    config: &LabelConfig,
    march_cfg: &MarchConfig,
) -> Result<CacheResult> {
    let background = config.cluster.background_class.unwrap_or(BACKGROUND_CLASS);
    let mut rng = seeds::rng(config.seed, 21);
    let samples = build_sample_set(
        fields,
        store,
        cameras,
        config.sample_pixels,
        config.sample_views,
        march_cfg,
        background,
        &mut rng,
    )?;
    let min_cluster_size = if config.min_cluster_sizes.len() > 1 {
        if labels.instances.len() != cameras.len() || labels.semantics.len() != cameras.len() {
            return Err(LiftError::LengthMismatch {
                expected: cameras.len(),
                actual: labels.instances.len(),
            });
        }
        let n = ((cameras.len() as f64 * config.tune_fraction).ceil() as usize).clamp(1, cameras.len());
        let mut views = rand::seq::index::sample(&mut rng, cameras.len(), n).into_vec();
        views.sort_unstable();
        let renders: Vec<ViewRender> = views
            .iter()
            .map(|&v| render_view(fields, store, &cameras[v], march_cfg, background))
            .collect();
        tune_min_cluster_size(&samples, &config.min_cluster_sizes, &config.cluster, |cache| {
            let mut preds = Vec::with_capacity(views.len());
            for r in &renders {
                preds.push(assign_labels(r.width, r.height, &r.embeddings, &r.classes, cache)?);
            }
            let sems: Vec<LabelMap> = renders.iter().map(ViewRender::semantic_map).collect();
            let p: Vec<Frame> = preds.iter().zip(&sems).map(|(i, s)| Frame::new(i, Some(s))).collect();
            let g: Vec<Frame> = views
                .iter()
                .map(|&v| Frame::new(&labels.instances[v], Some(&labels.semantics[v])))
                .collect();
            mean_pq_frame(&p, &g)
        })?
    } else {
        config
            .min_cluster_sizes
            .first()
            .copied()
            .unwrap_or(config.cluster.min_cluster_size)
    };
    let cluster = ClusterConfig {
        min_cluster_size,
        ..config.cluster.clone()
    };
    Ok(CacheResult {
        cache: hierarchical_cluster(&samples, &cluster)?,
        min_cluster_size,
        samples: samples.len(),
    })
}

/// Rendered instance and semantic labels of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedLabels {
    pub instance: LabelMap,
    pub semantic: LabelMap,
}

pub fn render_labels(
    fields: &Fields,
    store: &ParamStore,
    cameras: &[Camera],
    cache: &CentroidCache,
    march_cfg: &MarchConfig,
    background: u32,
) -> Result<Vec<RenderedLabels>> {
    if cache.dim != fields.embed_dim() && cache.num_instances() > 0 {
        return Err(LiftError::DimensionMismatch(format!(
            "cache holds {}-d centroids, the field renders {}-d embeddings",
            cache.dim,
            fields.embed_dim()
        )));
    }
    cameras
        .iter()
        .map(|c| {
            let r = render_view(fields, store, c, march_cfg, background);
            Ok(RenderedLabels {
                instance: assign_labels(r.width, r.height, &r.embeddings, &r.classes, cache)?,
                semantic: r.semantic_map(),
            })
        })
        .collect()
}

fn frames<'a>(maps: &'a [LabelMap], semantic: Option<&'a [LabelMap]>) -> Vec<Frame<'a>> {
    maps.iter()
        .enumerate()
        .map(|(i, m)| Frame::new(m, semantic.map(|s| &s[i])))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pq_scene: PqReport,
    /// Mean per-frame PQ.
    pub pq_frame: f64,
    pub miou: Option<f64>,
    /// Mean over frames; None without images, +inf if every frame is exact.
    pub psnr: Option<f64>,
}

/// Scores predicted labels (and optionally colors) against ground truth.
/// Semantic maps, when given for both sides, restrict matches to one class.
pub fn evaluate(
    pred: &[LabelMap],
    pred_semantic: Option<&[LabelMap]>,
    gt: &[LabelMap],
    gt_semantic: Option<&[LabelMap]>,
    num_classes: usize,
    images: Option<(&[Image], &[Image])>,
) -> Result<EvalReport> {
    let sems = match (pred_semantic, gt_semantic) {
        (Some(p), Some(g)) => Some((p, g)),
        _ => None,
    };
    if let Some((p, g)) = sems {
        if p.len() != pred.len() || g.len() != gt.len() {
            return Err(LiftError::LengthMismatch {
                expected: pred.len(),
                actual: p.len(),
            });
        }
    }
    let p = frames(pred, sems.map(|s| s.0));
    let g = frames(gt, sems.map(|s| s.1));
    let report = pq_scene(&p, &g)?;
    let frame = mean_pq_frame(&p, &g)?;
    let miou = match sems {
        Some((ps, gs)) => {
            let a: Vec<&LabelMap> = ps.iter().collect();
            let b: Vec<&LabelMap> = gs.iter().collect();
            Some(miou(&a, &b, num_classes)?)
        }
        None => None,
    };
    let psnr = match images {
        Some((a, b)) if !a.is_empty() => {
            if a.len() != b.len() {
                return Err(LiftError::LengthMismatch {
                    expected: b.len(),
                    actual: a.len(),
                });
            }
            let mut total = 0.0;
            for (x, y) in a.iter().zip(b) {
                let xs: Vec<Vec3> = (0..x.data.len()).map(|i| x.pixel_f64(i)).collect();
                let ys: Vec<Vec3> = (0..y.data.len()).map(|i| y.pixel_f64(i)).collect();
                total += psnr(&xs, &ys)?;
            }
            Some(total / a.len() as f64)
        }
        _ => None,
    };
    Ok(EvalReport {
        pq_scene: report,
        pq_frame: frame,
        miou,
        psnr,
    })
}
