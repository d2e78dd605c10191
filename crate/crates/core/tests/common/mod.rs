//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use lift_core::clustering::{Centroid, CentroidCache, ClassCentroids};
use lift_core::fields::{Activation, FieldConfig, Fields, ParamStore, SliceName};
use lift_core::geometry::{Aabb, Vec3};
use lift_core::image::{DepthMap, Image, LabelMap};
use lift_core::io::{
    decode_checkpoint, decode_depth, decode_log, decode_pgm, decode_ppm, encode_checkpoint, encode_depth,
    encode_log, encode_pgm16, encode_pgm8, encode_ppm, read_checkpoint, read_depth, read_json, read_log,
    read_pgm, read_ppm, write_checkpoint, write_depth, write_json, write_log, write_pgm16, write_pgm8,
    write_ppm, Checkpoint,
};
use lift_core::losses::{
    ae_loss, concentration_loss, contrastive_loss, linear_assignment_loss, margin_loss,
    slowfast_loss, EmbedBatch, PushForm,
};
use lift_core::metrics::{mean_pq_frame, pq_scene, Frame, PqReport};
use lift_core::pipeline::synthesize;
use lift_core::rendering::{march, Camera, CompactRay, MarchConfig, MarchedRay, Ray, SampleMode};
use lift_core::scenegen::{render_gt, NoiseOpts, Scene, SceneConfig, SceneObject, Shape, Theme};
use lift_core::training::{
    geometry_objective, instance_objective, semantic_objective, InstanceBatch, InstanceLoss, LogRow, Variant,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

/// Central-difference step and the magnitude below which errors count as absolute.
pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_MAX_PARAMS: usize = 300;

/// Uniform samples without culling keep every objective smooth in the parameters.
const FD_MARCH: MarchConfig = MarchConfig { samples: 8, cull: 0.0 };

/// A field small enough to difference every parameter, plus a ray batch.
pub struct Tiny {
    pub fields: Fields,
    pub store: ParamStore,
    pub rays: Vec<Ray>,
    pub targets: Vec<Vec3>,
    pub classes: Vec<u32>,
    pub labels: Vec<u32>,
    pub split: (Vec<usize>, Vec<usize>),
}

pub fn tiny(seed: u64) -> Tiny {
    let fields = Fields::new(FieldConfig {
        bounds: Aabb::cube(1.0),
        grid_res: [2, 2, 2],
        density_scale: 2.0,
        density_init: 0.0,
        color_channels: 2,
        dir_freqs: 1,
        color_hidden: 4,
        embed_dim: 3,
        instance_hidden: 6,
        instance_layers: 2,
        num_classes: 3,
        semantic_hidden: 4,
        semantic_layers: 2,
        activation: Activation::Softplus,
        instance_final_scale: 1.0,
    })
    .expect("valid tiny field");
    let mut store = fields.init_store(seed);
    let mut r = rng(seed ^ 0x5eed);
    for s in [SliceName::DensityGrid, SliceName::ColorGrid] {
        for v in store.slice_mut(s) {
            *v += r.random_range(-1.0..1.0);
        }
    }
    // slow targets away from the fast field
    for v in store.slice_mut(SliceName::InstanceSlow) {
        *v += r.random_range(-0.3..0.3);
    }
    let n = 12;
    let rays = (0..n)
        .map(|_| {
            let u: Vec3 = std::array::from_fn(|_| r.random_range(-1.0..1.0f64));
            let len = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            let origin = u.map(|x| 3.0 * x / len);
            let target: Vec3 = std::array::from_fn(|_| r.random_range(-0.5..0.5));
            let d: Vec3 = std::array::from_fn(|k| target[k] - origin[k]);
            let dl = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ray {
                origin,
                dir: d.map(|x| x / dl),
                near: 0.0,
                far: f64::INFINITY,
            }
        })
        .collect();
    let targets = (0..n).map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0))).collect();
    let classes = (0..n).map(|_| r.random_range(0..3)).collect();
    let mut labels: Vec<u32> = (0..n as u32).map(|i| 1 + i % 3).collect();
    labels.shuffle(&mut r);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut r);
    let split = (idx[..n / 2].to_vec(), idx[n / 2..].to_vec());
    Tiny {
        fields,
        store,
        rays,
        targets,
        classes,
        labels,
        split,
    }
}

impl Tiny {
    pub fn marched(&self, store: &ParamStore) -> Vec<MarchedRay> {
        self.rays
            .iter()
            .map(|r| march(&self.fields, store, r, &FD_MARCH, SampleMode::Uniform))
            .collect()
    }

    pub fn compact(&self) -> Vec<CompactRay> {
        self.marched(&self.store).iter().map(MarchedRay::compact).collect()
    }
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, FD_FLOOR) over
/// every parameter of `slices`.
pub fn max_rel_error(
    store: &ParamStore,
    slices: &[SliceName],
    analytic: &[f64],
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let scale = slices
        .iter()
        .flat_map(|&s| analytic[store.range(s)].iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(scale > 1e-3, "gradient over {slices:?} is too small to check ({scale:.1e})");
    let mut worst: f64 = 0.0;
    for &s in slices {
        for i in store.range(s) {
            let mut p = store.clone();
            p.values_mut()[i] += FD_STEP;
            let mut m = store.clone();
            m.values_mut()[i] -= FD_STEP;
            let num = (f(&p) - f(&m)) / (2.0 * FD_STEP);
            let a = analytic[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn photometric_error(t: &Tiny) -> f64 {
    let eval = |s: &ParamStore, grad: &mut [f64]| {
        let rays = t.marched(s);
        geometry_objective(&t.fields, s, &rays, &t.targets, None, (1.0, 0.0), grad)
            .expect("photometric objective")
            .rgb
    };
    let mut g = t.store.zero_grad();
    eval(&t.store, &mut g);
    let slices = [SliceName::DensityGrid, SliceName::ColorGrid, SliceName::ColorMlp];
    max_rel_error(&t.store, &slices, &g, |s| eval(s, &mut s.zero_grad()))
}

fn semantic_error(t: &Tiny) -> f64 {
    let rays = t.compact();
    let eval = |s: &ParamStore, grad: &mut [f64]| {
        let mut w = Default::default();
        semantic_objective(&t.fields, s, &rays, &t.classes, 1.0, grad, &mut w).expect("semantic objective")
    };
    let mut g = t.store.zero_grad();
    eval(&t.store, &mut g);
    max_rel_error(&t.store, &[SliceName::Semantic], &g, |s| eval(s, &mut s.zero_grad()))
}

fn instance_error(t: &Tiny, loss: &InstanceLoss) -> f64 {
    let rays = t.compact();
    let batch = InstanceBatch {
        rays: &rays,
        labels: &t.labels,
        image: 0,
        split: Some((&t.split.0, &t.split.1)),
    };
    let eval = |s: &ParamStore, grad: &mut [f64]| {
        let mut works = Vec::new();
        instance_objective(&t.fields, s, &batch, loss, 1.0, grad, &mut works)
            .expect("instance objective")
            .value
    };
    let mut g = t.store.zero_grad();
    eval(&t.store, &mut g);
    max_rel_error(&t.store, &[SliceName::InstanceFast], &g, |s| eval(s, &mut s.zero_grad()))
}

/// Every differentiable objective by name, checked against central
/// differences on the tiny field built from `seed`.
pub fn gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let t = tiny(seed);
    assert!(t.store.len() <= FD_MAX_PARAMS, "tiny field has {} parameters", t.store.len());
    let mut out = vec![
        ("photometric".to_string(), photometric_error(&t)),
        ("semantic-ce".to_string(), semantic_error(&t)),
    ];
    let mut cases: Vec<(String, InstanceLoss)> = Vec::new();
    for variant in Variant::ALL {
        let forms: &[PushForm] = if variant == Variant::Ae {
            &[PushForm::Literal, PushForm::Repulsive]
        } else {
            &[PushForm::Literal]
        };
        for &push in forms {
            let name = if variant == Variant::Ae {
                format!("ae-{}", if push == PushForm::Literal { "literal" } else { "repulsive" })
            } else {
                variant.as_str().to_string()
            };
            cases.push((
                name,
                InstanceLoss {
                    variant,
                    gamma: 1.0,
                    margin_eps: 1.0,
                    push,
                },
            ));
        }
    }
    for (name, loss) in cases {
        out.push((name, instance_error(&t, &loss)));
    }
    out
}

// ---------------------------------------------------------------- relabeling

/// Random batch, labels and an injective relabeling of the label values.
pub struct Relabel {
    pub emb: Vec<f64>,
    pub slow: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<u32>,
    pub slow_labels: Vec<u32>,
    pub mapped: Vec<u32>,
    pub slow_mapped: Vec<u32>,
    /// Softmax-like rows over `channels` for the assignment baseline.
    pub probs: Vec<f64>,
    pub channels: usize,
}

pub fn relabel_case(seed: u64) -> Relabel {
    let mut r = rng(seed);
    let dim = r.random_range(1..=4);
    let n = r.random_range(2..=24);
    let m = r.random_range(1..=24);
    let k = r.random_range(1..=4u32);
    let emb: Vec<f64> = (0..n * dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let slow: Vec<f64> = (0..m * dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels: Vec<u32> = (0..n).map(|_| r.random_range(1..=k)).collect();
    let slow_labels: Vec<u32> = (0..m).map(|_| r.random_range(1..=k)).collect();
    let mut targets: Vec<u32> = Vec::new();
    while targets.len() < k as usize {
        let v = r.random_range(1..10_000);
        if !targets.contains(&v) {
            targets.push(v);
        }
    }
    let map = |l: &[u32]| l.iter().map(|&x| targets[x as usize - 1]).collect::<Vec<_>>();
    let channels = 4;
    let probs = (0..n)
        .flat_map(|_| {
            let raw: Vec<f64> = (0..channels).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(move |x| x / s)
        })
        .collect();
    Relabel {
        mapped: map(&labels),
        slow_mapped: map(&slow_labels),
        emb,
        slow,
        dim,
        labels,
        slow_labels,
        probs,
        channels,
    }
}

/// Loss values (name, original, relabeled) for one case.
pub fn relabel_values(c: &Relabel) -> Vec<(&'static str, f64, f64)> {
    let n = c.labels.len();
    let m = c.slow_labels.len();
    let img_n = vec![0usize; n];
    let img_m = vec![0usize; m];
    let b = |e: &'static str, labels: &[u32], slow: &[u32]| -> f64 {
        let fast = EmbedBatch::new(&c.emb, c.dim, labels, &img_n).expect("batch");
        let sl = EmbedBatch::new(&c.slow, c.dim, slow, &img_m).expect("batch");
        match e {
            "contr" => contrastive_loss(&fast, 1.0).expect("contr").value,
            "sf" => slowfast_loss(&fast, &sl, 1.0).expect("sf").value,
            "conc" => concentration_loss(&fast, &sl, false).expect("conc").value,
            "ae-literal" => ae_loss(&fast, PushForm::Literal).expect("ae").value,
            "ae-repulsive" => ae_loss(&fast, PushForm::Repulsive).expect("ae").value,
            "margin" => margin_loss(&fast, 1.0).expect("margin").value,
            "linassign" => linear_assignment_loss(&c.probs, c.channels, labels).expect("linassign").cost,
            _ => unreachable!(),
        }
    };
    ["contr", "sf", "conc", "ae-literal", "ae-repulsive", "margin", "linassign"]
        .into_iter()
        .map(|e| (e, b(e, &c.labels, &c.slow_labels), b(e, &c.mapped, &c.slow_mapped)))
        .collect()
}

// ---------------------------------------------------------------- PQ oracle

/// Renames nonzero IDs through a random injective map.
pub fn permute(maps: &[LabelMap], seed: u64) -> Vec<LabelMap> {
    let mut r = rng(seed);
    let mut targets: Vec<u32> = (1..=64).collect();
    targets.shuffle(&mut r);
    let mut map: HashMap<u32, u32> = HashMap::new();
    maps.iter()
        .map(|m| {
            let data = m
                .data
                .iter()
                .map(|&v| {
                    if v == 0 {
                        0
                    } else {
                        let next = targets[map.len()];
                        *map.entry(v).or_insert(next)
                    }
                })
                .collect();
            LabelMap::from_vec(m.width, m.height, data).unwrap()
        })
        .collect()
}

pub fn sequence_pair(seed: u64) -> (Vec<LabelMap>, Vec<LabelMap>) {
    let mut r = rng(seed);
    let frames = r.random_range(1..=3);
    let side = r.random_range(2..=8);
    let gt = random_sequence(&mut r, frames, side, 4);
    // predictions near the ground truth so matches actually occur
    let pred: Vec<LabelMap> = gt
        .iter()
        .map(|m| {
            let data = m
                .data
                .iter()
                .map(|&v| if r.random_bool(0.15) { r.random_range(0..=4) } else { v })
                .collect();
            LabelMap::from_vec(m.width, m.height, data).unwrap()
        })
        .collect();
    (permute(&pred, seed ^ 1), gt)
}

pub fn pq_frame(pred: &[LabelMap], gt: &[LabelMap]) -> f64 {
    let p: Vec<Frame> = pred.iter().map(Frame::instances).collect();
    let g: Vec<Frame> = gt.iter().map(Frame::instances).collect();
    mean_pq_frame(&p, &g).unwrap()
}

/// Same segments, possibly different IDs: the old-to-new map is a bijection per frame.
pub fn same_shapes(a: &LabelMap, b: &LabelMap) -> bool {
    let mut fwd: HashMap<u32, u32> = HashMap::new();
    let mut back: HashMap<u32, u32> = HashMap::new();
    a.data.iter().zip(&b.data).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}


pub fn random_sequence(r: &mut impl Rng, frames: usize, side: usize, ids: u32) -> Vec<LabelMap> {
    (0..frames)
        .map(|_| {
            // blocky maps so segments overlap substantially
            let block = r.random_range(1..=4);
            let cells = side.div_ceil(block);
            let ids_cells: Vec<u32> = (0..cells * cells).map(|_| r.random_range(0..=ids)).collect();
            let mut data = vec![0; side * side];
            for y in 0..side {
                for x in 0..side {
                    data[y * side + x] = ids_cells[(y / block) * cells + x / block];
                }
            }
            // sprinkle some pixel noise
            for v in data.iter_mut() {
                if r.random_bool(0.1) {
                    *v = r.random_range(0..=ids);
                }
            }
            LabelMap::from_vec(side, side, data).expect("shape")
        })
        .collect()
}

/// PQ-scene by enumerating every matching between predicted and ground-truth
/// multi-view subsets, keeping those whose pairs all have IoU > 0.5, and
/// taking the largest (ties by summed IoU).
pub fn brute_pq_scene(pred: &[LabelMap], gt: &[LabelMap]) -> (f64, usize, usize, usize) {
    let masks = |maps: &[LabelMap]| -> BTreeMap<u32, Vec<bool>> {
        let mut out: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        let total: usize = maps.iter().map(|m| m.data.len()).sum();
        let mut off = 0;
        for m in maps {
            for (i, &v) in m.data.iter().enumerate() {
                if v != 0 {
                    out.entry(v).or_insert_with(|| vec![false; total])[off + i] = true;
                }
            }
            off += m.data.len();
        }
        out
    };
    let p: Vec<Vec<bool>> = masks(pred).into_values().collect();
    let g: Vec<Vec<bool>> = masks(gt).into_values().collect();
    let iou = |a: &[bool], b: &[bool]| {
        let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
        let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    };
    let table: Vec<Vec<f64>> = p.iter().map(|a| g.iter().map(|b| iou(a, b)).collect()).collect();
    // best (count, sum) over partial injective matchings from p to g
    fn search(table: &[Vec<f64>], row: usize, used: &mut Vec<bool>, count: usize, sum: f64, best: &mut (usize, f64)) {
        if row == table.len() {
            if count > best.0 || (count == best.0 && sum > best.1) {
                *best = (count, sum);
            }
            return;
        }
        search(table, row + 1, used, count, sum, best);
        for c in 0..used.len() {
            if !used[c] && table[row][c] > 0.5 {
                used[c] = true;
                search(table, row + 1, used, count + 1, sum + table[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    search(&table, 0, &mut vec![false; g.len()], 0, 0.0, &mut best);
    let (tp, sum) = best;
    let fp = p.len() - tp;
    let fn_ = g.len() - tp;
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let pq = if denom == 0.0 { 1.0 } else { sum / denom };
    (pq, tp, fp, fn_)
}

pub fn pq_scene_plain(pred: &[LabelMap], gt: &[LabelMap]) -> PqReport {
    let p: Vec<Frame> = pred.iter().map(Frame::instances).collect();
    let g: Vec<Frame> = gt.iter().map(Frame::instances).collect();
    pq_scene(&p, &g).expect("pq_scene")
}

// ---------------------------------------------------------------- Hungarian oracle

/// Minimum total cost over injective matchings of the smaller side, by enumeration.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // enumerate over the smaller side so every one of its entries is matched
    let at = |small: usize, big: usize| if rows <= cols { cost[small][big] } else { cost[big][small] };
    fn go(at: &dyn Fn(usize, usize) -> f64, small: usize, n: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if small == n {
            *best = best.min(acc);
            return;
        }
        for b in 0..used.len() {
            if !used[b] {
                used[b] = true;
                go(at, small + 1, n, used, acc + at(small, b), best);
                used[b] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(&at, 0, rows.min(cols), &mut vec![false; rows.max(cols)], 0.0, &mut best);
    best
}

// ---------------------------------------------------------------- occlusion fixture

/// A box close to the camera in front of a distant sphere, seen by a camera
/// sliding sideways: the sphere shows the same face at both ends of the sweep
/// and is hidden behind the box in between.
pub struct Occlusion {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub instances: Vec<LabelMap>,
    pub depths: Vec<lift_core::image::DepthMap>,
}

pub const OCCLUDED_ID: u32 = 2;

pub fn occlusion_fixture(views: usize) -> Occlusion {
    let objects = vec![
        SceneObject {
            shape: Shape::Box { half: [0.45, 0.1, 0.5] },
            center: [0.0, -3.0, 0.5],
            color: [0.8, 0.2, 0.2],
            id: 1,
            class: 1,
        },
        SceneObject {
            shape: Shape::Sphere { radius: 0.35 },
            center: [0.0, 1.0, 0.35],
            color: [0.2, 0.3, 0.9],
            id: OCCLUDED_ID,
            class: 1,
        },
    ];
    let scene = Scene {
        objects,
        floor_half: 4.0,
        checker: 0.25,
        light: [0.3, -0.5, 0.8],
        ambient: 0.3,
        theme: Theme::OldRoom,
        bounds: Aabb::new([-4.0, -4.0, -0.01], [4.0, 4.0, 1.2]),
        num_classes: 2,
    };
    let cameras: Vec<Camera> = (0..views)
        .map(|k| {
            let x = -2.2 + 4.4 * k as f64 / (views - 1) as f64;
            Camera::look_at([x, -6.0, 0.6], [0.0, -1.0, 0.4], [0.0, 0.0, 1.0], 100.0, 64, 48).expect("camera")
        })
        .collect();
    let frames: Vec<_> = cameras.iter().map(|c| render_gt(&scene, c)).collect();
    Occlusion {
        scene,
        instances: frames.iter().map(|f| f.instance.clone()).collect(),
        depths: frames.iter().map(|f| f.depth.clone()).collect(),
        cameras,
    }
}

// ---------------------------------------------------------------- formats

pub const FUZZ_CASES: usize = 10_000;

pub fn label_map(r: &mut ChaCha8Rng, max: u32) -> LabelMap {
    let (w, h) = (r.random_range(1..12), r.random_range(1..12));
    LabelMap::from_vec(w, h, (0..w * h).map(|_| r.random_range(0..=max)).collect()).unwrap()
}

pub fn image(r: &mut ChaCha8Rng) -> Image {
    let (w, h) = (r.random_range(1..12), r.random_range(1..12));
    Image {
        width: w,
        height: h,
        data: (0..w * h).map(|_| r.random()).collect(),
    }
}

pub fn depth(r: &mut ChaCha8Rng) -> DepthMap {
    let (w, h) = (r.random_range(1..12), r.random_range(1..12));
    DepthMap {
        width: w,
        height: h,
        // any bit pattern, infinities and NaNs included
        data: (0..w * h).map(|_| f32::from_bits(r.random())).collect(),
    }
}

pub fn checkpoint(r: &mut ChaCha8Rng) -> Checkpoint {
    let names = ["density_grid", "color_grid", "color_mlp", "instance_fast", "instance_slow", "semantic"];
    Checkpoint {
        slices: names[..r.random_range(0..=names.len())]
            .iter()
            .map(|n| (n.to_string(), (0..r.random_range(0..20)).map(|_| f32::from_bits(r.random())).collect()))
            .collect(),
    }
}

pub fn log(r: &mut ChaCha8Rng) -> Vec<LogRow> {
    let opt = |r: &mut ChaCha8Rng| r.random_bool(0.6).then(|| r.random_range(-1e3..1e3));
    (0..r.random_range(0..10))
        .map(|i| LogRow {
            iter: i,
            loss_rgb: opt(r),
            loss_sem: opt(r),
            loss_inst: opt(r),
            skipped_frac: opt(r),
            grad_rvar: opt(r),
        })
        .collect()
}

pub fn cache(r: &mut ChaCha8Rng) -> CentroidCache {
    let dim = r.random_range(1..5);
    let mut next = 1;
    CentroidCache {
        dim,
        classes: (1..r.random_range(1..4))
            .map(|class| ClassCentroids {
                class,
                centroids: (0..r.random_range(0..4))
                    .map(|_| {
                        next += 1;
                        Centroid {
                            id: next - 1,
                            centroid: (0..dim).map(|_| r.random_range(-5.0..5.0)).collect(),
                        }
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Runs every parser on `bytes`; a panic fails the test.
pub fn parse_all(bytes: &[u8]) -> [bool; 7] {
    [
        decode_ppm(bytes).is_ok(),
        decode_pgm(bytes).is_ok(),
        decode_depth(bytes).is_ok(),
        decode_checkpoint(bytes).is_ok(),
        decode_log(bytes).is_ok(),
        serde_json::from_slice::<CentroidCache>(bytes).is_ok(),
        serde_json::from_slice::<Vec<Camera>>(bytes).is_ok(),
    ]
}


/// One valid encoding of every format.
pub fn valid_files(r: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let s = synthesize(
        &SceneConfig {
            objects: 3,
            width: 8,
            height: 6,
            views: Some(1),
            ..SceneConfig::default()
        },
        &NoiseOpts::default(),
    )
    .expect("small scene");
    let f = &s.dataset_frames()[0];
    vec![
        encode_ppm(&f.rgb),
        encode_pgm16(f.instance_gt.as_ref().expect("gt")).expect("16-bit map"),
        encode_pgm8(f.semantic.as_ref().expect("semantic")).expect("8-bit map"),
        encode_depth(f.depth.as_ref().expect("depth")),
        encode_checkpoint(&checkpoint(r)),
        encode_log(&log(r)).expect("log"),
        serde_json::to_vec(&cache(r)).expect("cache json"),
        serde_json::to_vec(&s.cameras).expect("camera json"),
    ]
}

/// A few random byte edits, truncations, insertions or overwritten fields.
pub fn mutate(b: &mut Vec<u8>, r: &mut ChaCha8Rng) {
    for _ in 0..r.random_range(1..4) {
        match r.random_range(0..4) {
            0 if !b.is_empty() => {
                let i = r.random_range(0..b.len());
                b[i] = r.random();
            }
            1 => b.truncate(r.random_range(0..=b.len())),
            2 => {
                let i = r.random_range(0..=b.len());
                b.insert(i, r.random());
            }
            _ if b.len() >= 16 => {
                // header fields overwritten with large numbers
                let i = r.random_range(0..b.len() - 8);
                b[i..i + 8].copy_from_slice(&u64::MAX.to_le_bytes());
            }
            _ => {}
        }
    }
}

/// Encodes and decodes one random value of every format, in memory and
/// through files under `dir`; the first mismatch is returned.
pub fn round_trip(seed: u64, dir: &Path) -> Result<(), String> {
    let mut r = rng(seed);
    let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("seed {seed}: {what} changed")) };
    let m = label_map(&mut r, 65535);
    check(decode_pgm(&encode_pgm16(&m).expect("16-bit")).as_ref() == Ok(&m), "16-bit pgm")?;
    let p = dir.join("m.pgm");
    write_pgm16(&p, &m).expect("write pgm");
    check(read_pgm(&p).ok().as_ref() == Some(&m), "16-bit pgm file")?;
    let s = label_map(&mut r, 255);
    check(decode_pgm(&encode_pgm8(&s).expect("8-bit")).as_ref() == Ok(&s), "8-bit pgm")?;
    write_pgm8(&p, &s).expect("write pgm");
    check(read_pgm(&p).ok().as_ref() == Some(&s), "8-bit pgm file")?;
    let img = image(&mut r);
    check(decode_ppm(&encode_ppm(&img)).as_ref() == Ok(&img), "ppm")?;
    let p = dir.join("i.ppm");
    write_ppm(&p, &img).expect("write ppm");
    check(read_ppm(&p).ok().as_ref() == Some(&img), "ppm file")?;

    let d = depth(&mut r);
    let bytes = encode_depth(&d);
    let same_depth = |b: &DepthMap| {
        (b.width, b.height) == (d.width, d.height)
            && b.data.iter().zip(&d.data).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    check(decode_depth(&bytes).is_ok_and(|b| same_depth(&b)), "depth")?;
    let p = dir.join("d.depth");
    write_depth(&p, &d).expect("write depth");
    check(read_depth(&p).is_ok_and(|b| same_depth(&b)), "depth file")?;

    let ck = checkpoint(&mut r);
    let bytes = encode_checkpoint(&ck);
    check(decode_checkpoint(&bytes).map(|c| encode_checkpoint(&c)).as_ref() == Ok(&bytes), "checkpoint")?;
    let p = dir.join("c.ckpt");
    write_checkpoint(&p, &ck).expect("write checkpoint");
    check(std::fs::read(&p).ok().as_ref() == Some(&bytes), "checkpoint file")?;
    check(read_checkpoint(&p).map(|c| encode_checkpoint(&c)).ok().as_ref() == Some(&bytes), "checkpoint file")?;

    let rows = log(&mut r);
    check(decode_log(&encode_log(&rows).expect("log")).as_ref() == Ok(&rows), "log")?;
    let p = dir.join("l.csv");
    write_log(&p, &rows).expect("write log");
    check(read_log(&p).ok().as_ref() == Some(&rows), "log file")?;

    let k = cache(&mut r);
    let p = dir.join("k.json");
    write_json(&p, &k).expect("write cache");
    check(read_json::<CentroidCache>(&p).ok().as_ref() == Some(&k), "cache json")?;
    Ok(())
}
