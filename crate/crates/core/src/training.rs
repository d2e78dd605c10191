//! Optimization: Adam, the EMA slow-field update, batch partitioning, the
//! phase schedule and the per-phase objectives.
//!
//! Density and color only ever receive gradients from the photometric loss;
//! instance and semantic losses see the ray weights as constants.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::fields::{softmax_backward, softmax_into, Branch, FieldConfig, Fields, ParamStore, SliceName};
use crate::geometry::Vec3;
use crate::losses::{
    ae_loss, concentration_loss, contrastive_loss, grad_relative_variance, linear_assignment_loss,
    margin_loss, photometric_loss, semantic_ce_loss, slowfast_loss, EmbedBatch, LossGrad, PushForm,
};
use crate::rendering::{
    color_backward, instance_backward, march, render_color, render_instance, render_semantic,
    semantic_backward, Camera, ColorWork, CompactRay, InstanceWork, MarchConfig, MarchedRay,
    SampleMode, SemanticWork,
};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "sf+conc")]
    SfConc,
    #[serde(rename = "sf")]
    Sf,
    #[serde(rename = "contr")]
    Contr,
    #[serde(rename = "contr+conc-fast")]
    ContrConcFast,
    #[serde(rename = "ae")]
    Ae,
    #[serde(rename = "margin")]
    Margin,
    #[serde(rename = "linassign")]
    LinAssign,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::SfConc,
        Variant::Sf,
        Variant::Contr,
        Variant::ContrConcFast,
        Variant::Ae,
        Variant::Margin,
        Variant::LinAssign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SfConc => "sf+conc",
            Variant::Sf => "sf",
            Variant::Contr => "contr",
            Variant::ContrConcFast => "contr+conc-fast",
            Variant::Ae => "ae",
            Variant::Margin => "margin",
            Variant::LinAssign => "linassign",
        }
    }

    /// Whether the variant trains against the slow field.
    pub fn uses_slow(self) -> bool {
        matches!(self, Variant::SfConc | Variant::Sf)
    }

    fn splits(self) -> bool {
        matches!(self, Variant::SfConc | Variant::Sf | Variant::ContrConcFast)
    }
}

impl std::str::FromStr for Variant {
    type Err = LiftError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LiftError::Config(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Instance-loss settings shared by the trainer and the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceLoss {
    pub variant: Variant,
    pub gamma: f64,
    pub margin_eps: f64,
    pub push: PushForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Fraction of `iterations` at which the semantic loss switches on.
    pub semantic_start: f64,
    /// Fraction of `iterations` at which the instance loss switches on.
    pub instance_start: f64,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Learning rate of the instance perceptron; defaults to `lr_mlp`.
    pub lr_instance: Option<f64>,
    pub rgb_batch: usize,
    pub instance_batch: usize,
    pub ema_momentum: f64,
    pub weight_rgb: f64,
    pub weight_semantic: f64,
    pub weight_instance: f64,
    pub gamma: f64,
    pub margin_eps: f64,
    pub ae_push: PushForm,
    pub variant: Variant,
    pub samples: usize,
    pub cull: f64,
    pub stratified: bool,
    /// Stop fitting density and color once the instance phase starts and
    /// reuse one set of ray weights from then on.
    pub freeze_geometry: bool,
    /// Cull threshold of the cached rays once geometry is frozen, and of
    /// label rendering after such a run.
    pub frozen_cull: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            semantic_start: 0.1,
            instance_start: 0.4,
            lr_grid: 1e-2,
            lr_mlp: 5e-4,
            lr_instance: None,
            rgb_batch: 512,
            instance_batch: 256,
            ema_momentum: 0.9,
            weight_rgb: 1.0,
            weight_semantic: 0.1,
            weight_instance: 0.1,
            gamma: 1.0,
            margin_eps: 1.0,
            ae_push: PushForm::Literal,
            variant: Variant::SfConc,
            samples: 64,
            cull: 1e-4,
            stratified: true,
            freeze_geometry: false,
            frozen_cull: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LiftError::Config(m.to_string()));
        let fractions = [self.semantic_start, self.instance_start];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("phase fractions must lie in [0, 1]");
        }
        if self.semantic_start > self.instance_start {
            return bad("phase fractions must be non-decreasing (semantic_start <= instance_start)");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1)");
        }
        if self.samples < 2 {
            return bad("need at least 2 samples per ray");
        }
        if self.rgb_batch == 0 || self.instance_batch < 2 {
            return bad("rgb_batch must be >= 1 and instance_batch >= 2");
        }
        if !(self.gamma > 0.0) || !(self.margin_eps > 0.0) {
            return bad("gamma and margin_eps must be positive");
        }
        Ok(())
    }

    pub fn semantic_iter(&self) -> usize {
        (self.semantic_start * self.iterations as f64).round() as usize
    }

    pub fn instance_iter(&self) -> usize {
        (self.instance_start * self.iterations as f64).round() as usize
    }

    pub fn march(&self) -> MarchConfig {
        MarchConfig {
            samples: self.samples,
            cull: self.cull,
        }
    }

    /// March settings for rendering a trained field, matching what the
    /// instance phase saw.
    pub fn render_march(&self) -> MarchConfig {
        MarchConfig {
            samples: self.samples,
            cull: if self.freeze_geometry {
                self.frozen_cull
            } else {
                self.cull
            },
        }
    }

    pub fn instance_loss(&self) -> InstanceLoss {
        InstanceLoss {
            variant: self.variant,
            gamma: self.gamma,
            margin_eps: self.margin_eps,
            push: self.ae_push,
        }
    }

    fn lr(&self, slice: SliceName) -> f64 {
        match slice {
            s if s.is_grid() => self.lr_grid,
            SliceName::InstanceFast => self.lr_instance.unwrap_or(self.lr_mlp),
            _ => self.lr_mlp,
        }
    }
}

/// slow ← m·slow + (1 − m)·fast
pub fn ema_update(slow: &mut [f64], fast: &[f64], m: f64) -> Result<()> {
    if slow.len() != fast.len() {
        return Err(LiftError::LengthMismatch {
            expected: slow.len(),
            actual: fast.len(),
        });
    }
    for (s, f) in slow.iter_mut().zip(fast) {
        *s = m * *s + (1.0 - m) * f;
    }
    Ok(())
}

/// Random partition of `0..n` into (Ω₁, Ω₂) with the odd element in Ω₁.
pub fn split_batch(n: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let b = idx.split_off(n.div_ceil(2));
    (idx, b)
}

/// Adam moments with a step counter per slice, so slices that switch on late
/// get their own bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: HashMap<SliceName, u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: HashMap::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of each listed slice that is trainable. Other slices,
/// including the slow field, are left untouched.
pub fn adam_step(
    store: &mut ParamStore,
    adam: &mut Adam,
    grad: &[f64],
    lrs: &[(SliceName, f64)],
) -> Result<()> {
    store.check_gradient(grad)?;
    for &(slice, lr) in lrs {
        if !store.is_trainable(slice) {
            continue;
        }
        let t = adam.steps.entry(slice).or_insert(0);
        *t += 1;
        let c1 = 1.0 - adam.beta1.powi(*t as i32);
        let c2 = 1.0 - adam.beta2.powi(*t as i32);
        let r = store.range(slice);
        let values = store.slice_mut(slice);
        for (k, i) in r.enumerate() {
            let g = grad[i];
            adam.m[i] = adam.beta1 * adam.m[i] + (1.0 - adam.beta1) * g;
            adam.v[i] = adam.beta2 * adam.v[i] + (1.0 - adam.beta2) * g * g;
            let mh = adam.m[i] / c1;
            let vh = adam.v[i] / c2;
            values[k] -= lr * mh / (vh.sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// One training view: camera, RGB target and 2D labels.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub rgb: Vec<Vec3>,
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub views: Vec<TrainView>,
    pub num_classes: usize,
    /// Semantic class treated as stuff: no instance supervision there.
    pub background_class: u32,
}

impl TrainData {
    fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(LiftError::Config("training needs at least one view".into()));
        }
        for v in &self.views {
            let n = v.camera.num_pixels();
            for len in [v.rgb.len(), v.semantic.len(), v.instance.len()] {
                if len != n {
                    return Err(LiftError::LengthMismatch {
                        expected: n,
                        actual: len,
                    });
                }
            }
            if let Some(&c) = v.semantic.iter().find(|&&c| c as usize >= self.num_classes) {
                return Err(LiftError::Config(format!(
                    "semantic label {c} outside {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    fn is_thing(&self, view: &TrainView, p: usize) -> bool {
        view.instance[p] != 0 && view.semantic[p] != self.background_class
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss_rgb: Option<f64>,
    pub loss_sem: Option<f64>,
    pub loss_inst: Option<f64>,
    pub skipped_frac: Option<f64>,
    pub grad_rvar: Option<f64>,
}

impl LogRow {
    pub const HEADER: [&'static str; 6] = [
        "iter",
        "loss_rgb",
        "loss_sem",
        "loss_inst",
        "skipped_frac",
        "grad_rvar",
    ];
}

/// Cycles through a shuffled pixel list, reshuffling after each pass.
#[derive(Debug, Clone)]
struct PixelOrder {
    pixels: Vec<u32>,
    cursor: usize,
}

impl PixelOrder {
    fn new(pixels: Vec<u32>, rng: &mut impl Rng) -> Self {
        let mut o = PixelOrder { pixels, cursor: 0 };
        o.pixels.shuffle(rng);
        o
    }

    fn take(&mut self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = n.min(self.pixels.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.pixels.len() {
                self.pixels.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.pixels[self.cursor] as usize);
            self.cursor += 1;
        }
        out
    }
}

/// Result of the photometric (+ optional semantic) pass over a ray batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryLosses {
    pub rgb: f64,
    pub semantic: Option<f64>,
}

/// Photometric loss over `rays`, plus semantic cross-entropy on the same rays
/// when `semantic` labels are given. Gradients (already weighted) are added
/// to `grad`; only the photometric term reaches density.
#[allow(clippy::too_many_arguments)]
pub fn geometry_objective(
    fields: &Fields,
    store: &ParamStore,
    rays: &[MarchedRay],
    targets: &[Vec3],
    semantic: Option<&[u32]>,
    weights: (f64, f64),
    grad: &mut [f64],
) -> Result<GeometryLosses> {
    let n = rays.len();
    let mut cw = ColorWork::default();
    let mut sw = SemanticWork::default();
    let mut scratch = Vec::new();
    let mut rgb = 0.0;
    let mut compact = Vec::with_capacity(if semantic.is_some() { n } else { 0 });
    for (ray, target) in rays.iter().zip(targets) {
        let c = render_color(fields, store, ray, &mut cw);
        let (v, g) = photometric_loss(&[c], &[*target])?;
        rgb += v / n as f64;
        let g = g[0].map(|x| x * weights.0 / n as f64);
        color_backward(fields, store, ray, &cw, g, grad, &mut scratch, true);
        if semantic.is_some() {
            compact.push(ray.compact());
        }
    }
    let semantic = match semantic {
        Some(labels) => Some(semantic_objective(
            fields, store, &compact, labels, weights.1, grad, &mut sw,
        )?),
        None => None,
    };
    Ok(GeometryLosses { rgb, semantic })
}

/// Cross-entropy of the normalized rendered class distribution. Rays with no
/// kept samples are left out of the mean.
pub fn semantic_objective(
    fields: &Fields,
    store: &ParamStore,
    rays: &[CompactRay],
    labels: &[u32],
    weight: f64,
    grad: &mut [f64],
    work: &mut SemanticWork,
) -> Result<f64> {
    let s = fields.num_classes();
    let valid = rays.iter().filter(|r| r.opacity() > 0.0).count();
    if valid == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / valid as f64;
    let mut scratch = Vec::new();
    let mut total = 0.0;
    for (ray, &y) in rays.iter().zip(labels) {
        let Some(p) = render_semantic(fields, store, ray, work) else {
            continue;
        };
        let (v, g) = semantic_ce_loss(&p, s, &[y])?;
        total += v * inv;
        let g: Vec<f64> = g.iter().map(|x| x * inv * weight).collect();
        semantic_backward(fields, store, ray, work, &g, grad, &mut scratch);
    }
    Ok(total)
}

/// Pixels of one image prepared for an instance loss.
#[derive(Debug, Clone, Copy)]
pub struct InstanceBatch<'a> {
    pub rays: &'a [CompactRay],
    pub labels: &'a [u32],
    pub image: usize,
    /// (Ω₁, Ω₂) indices; required by the slow-fast and contr+conc(fast) variants.
    pub split: Option<(&'a [usize], &'a [usize])>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceStats {
    pub value: f64,
    pub skipped_frac: f64,
}

/// Renders the embeddings the variant needs, evaluates its loss and pushes
/// `weight`·gradient into the fast instance slice of `grad`.
pub fn instance_objective(
    fields: &Fields,
    store: &ParamStore,
    batch: &InstanceBatch,
    loss: &InstanceLoss,
    weight: f64,
    grad: &mut [f64],
    works: &mut Vec<InstanceWork>,
) -> Result<InstanceStats> {
    let n = batch.rays.len();
    let dim = fields.embed_dim();
    if batch.labels.len() != n {
        return Err(LiftError::LengthMismatch {
            expected: n,
            actual: batch.labels.len(),
        });
    }
    if works.len() < n {
        works.resize_with(n, InstanceWork::default);
    }
    let split = if loss.variant.splits() {
        Some(batch.split.ok_or_else(|| {
            LiftError::Config(format!("variant {} needs an Ω₁/Ω₂ split", loss.variant))
        })?)
    } else {
        None
    };
    // fast embeddings: only Ω₁ for slow-fast variants, every pixel otherwise
    let fast_idx: Vec<usize> = match (loss.variant.uses_slow(), split) {
        (true, Some((a, _))) => a.to_vec(),
        _ => (0..n).collect(),
    };
    let mut fast = Vec::with_capacity(fast_idx.len() * dim);
    for (k, &i) in fast_idx.iter().enumerate() {
        fast.extend(render_instance(fields, store, Branch::Fast, &batch.rays[i], &mut works[k]));
    }
    let fast_labels: Vec<u32> = fast_idx.iter().map(|&i| batch.labels[i]).collect();
    let images = vec![batch.image; n];
    let fast_b = EmbedBatch::new(&fast, dim, &fast_labels, &images[..fast_idx.len()])?;
    // gradient w.r.t. each fast row
    let mut g_fast = vec![0.0; fast.len()];
    let add = |dst: &mut [f64], src: &[f64]| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    };
    let stats = match loss.variant {
        Variant::SfConc | Variant::Sf => {
            let (_, b) = split.expect("checked above");
            let mut slow = Vec::with_capacity(b.len() * dim);
            let mut w = InstanceWork::default();
            for &i in b {
                slow.extend(render_instance(fields, store, Branch::Slow, &batch.rays[i], &mut w));
            }
            let slow_labels: Vec<u32> = b.iter().map(|&i| batch.labels[i]).collect();
            let slow_b = EmbedBatch::new(&slow, dim, &slow_labels, &images[..b.len()])?;
            let sf = slowfast_loss(&fast_b, &slow_b, loss.gamma)?;
            add(&mut g_fast, &sf.grad);
            let mut value = sf.value;
            if loss.variant == Variant::SfConc {
                let conc = concentration_loss(&fast_b, &slow_b, false)?;
                add(&mut g_fast, &conc.grad);
                value += conc.value;
            }
            InstanceStats {
                value,
                skipped_frac: sf.skipped_fraction(),
            }
        }
        Variant::Contr => {
            let r = contrastive_loss(&fast_b, loss.gamma)?;
            add(&mut g_fast, &r.grad);
            InstanceStats {
                value: r.value,
                skipped_frac: 0.0,
            }
        }
        Variant::ContrConcFast => {
            let r = contrastive_loss(&fast_b, loss.gamma)?;
            add(&mut g_fast, &r.grad);
            let (a, b) = split.expect("checked above");
            let rows = |idx: &[usize]| -> (Vec<f64>, Vec<u32>) {
                let mut e = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    e.extend_from_slice(&fast[i * dim..(i + 1) * dim]);
                }
                (e, idx.iter().map(|&i| batch.labels[i]).collect())
            };
            let (ea, la) = rows(a);
            let (eb, lb) = rows(b);
            let ba = EmbedBatch::new(&ea, dim, &la, &images[..a.len()])?;
            let bb = EmbedBatch::new(&eb, dim, &lb, &images[..b.len()])?;
            let conc = concentration_loss(&ba, &bb, true)?;
            for (k, &i) in a.iter().enumerate() {
                add(&mut g_fast[i * dim..(i + 1) * dim], &conc.grad[k * dim..(k + 1) * dim]);
            }
            for (k, &i) in b.iter().enumerate() {
                add(
                    &mut g_fast[i * dim..(i + 1) * dim],
                    &conc.grad_targets[k * dim..(k + 1) * dim],
                );
            }
            InstanceStats {
                value: r.value + conc.value,
                skipped_frac: conc.skipped_fraction(),
            }
        }
        Variant::Ae => {
            let r = ae_loss(&fast_b, loss.push)?;
            add(&mut g_fast, &r.grad);
            InstanceStats {
                value: r.value,
                skipped_frac: 0.0,
            }
        }
        Variant::Margin => {
            let r = margin_loss(&fast_b, loss.margin_eps)?;
            add(&mut g_fast, &r.grad);
            InstanceStats {
                value: r.value,
                skipped_frac: 0.0,
            }
        }
        Variant::LinAssign => {
            let mut probs = Vec::with_capacity(fast.len());
            let mut p = Vec::new();
            for row in fast.chunks(dim) {
                softmax_into(row, &mut p);
                probs.extend_from_slice(&p);
            }
            let r: LossGrad = linear_assignment_loss(&probs, dim, &fast_labels)?.loss;
            for (k, (pr, gp)) in probs.chunks(dim).zip(r.grad.chunks(dim)).enumerate() {
                add(&mut g_fast[k * dim..(k + 1) * dim], &softmax_backward(pr, gp));
            }
            InstanceStats {
                value: r.value,
                skipped_frac: 0.0,
            }
        }
    };
    let mut scratch = Vec::new();
    for (k, &i) in fast_idx.iter().enumerate() {
        let g: Vec<f64> = g_fast[k * dim..(k + 1) * dim].iter().map(|x| x * weight).collect();
        instance_backward(fields, store, &batch.rays[i], &works[k], &g, grad, &mut scratch);
    }
    Ok(stats)
}

/// Ray weights for every pixel of every view, computed once geometry is frozen.
#[derive(Debug, Clone)]
struct RayCache {
    views: Vec<Vec<CompactRay>>,
}

/// Stateful training loop. Cloning (or [`Trainer::fork`]) lets several
/// instance-loss variants share one geometry phase.
#[derive(Debug, Clone)]
pub struct Trainer {
    fields: Fields,
    store: ParamStore,
    adam: Adam,
    data: Arc<TrainData>,
    config: TrainConfig,
    iter: usize,
    rng: ChaCha8Rng,
    all_pixels: Vec<PixelOrder>,
    thing_pixels: Vec<PixelOrder>,
    instance_started: bool,
    cache: Option<Arc<RayCache>>,
    log: Vec<LogRow>,
    works: Vec<InstanceWork>,
}

impl Trainer {
    pub fn new(fields: Fields, store: ParamStore, data: Arc<TrainData>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.num_classes != fields.num_classes() {
            return Err(LiftError::Config(format!(
                "data has {} semantic classes, field has {}",
                data.num_classes,
                fields.num_classes()
            )));
        }
        if store.len() != fields.empty_store().len() {
            return Err(LiftError::LengthMismatch {
                expected: fields.empty_store().len(),
                actual: store.len(),
            });
        }
        let mut rng = seeds::rng(config.seed, 7);
        let mut all_pixels = Vec::new();
        let mut thing_pixels = Vec::new();
        for v in &data.views {
            let n = v.camera.num_pixels() as u32;
            all_pixels.push(PixelOrder::new((0..n).collect(), &mut rng));
            let things = (0..n).filter(|&p| data.is_thing(v, p as usize)).collect();
            thing_pixels.push(PixelOrder::new(things, &mut rng));
        }
        Ok(Trainer {
            adam: Adam::new(store.len()),
            fields,
            store,
            data,
            config,
            iter: 0,
            rng,
            all_pixels,
            thing_pixels,
            instance_started: false,
            cache: None,
            log: Vec::new(),
            works: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn fields(&self) -> &Fields {
        &self.fields
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn into_parts(self) -> (Fields, ParamStore, Vec<LogRow>) {
        (self.fields, self.store, self.log)
    }

    /// Copy of this trainer that continues with another instance variant,
    /// optionally another embedding size, and instance weights and batch
    /// order drawn afresh from `seed`. Geometry, color and semantic state are
    /// shared.
    pub fn fork(&self, variant: Variant, embed_dim: Option<usize>, seed: u64) -> Result<Trainer> {
        if self.instance_started {
            return Err(LiftError::Config(
                "fork before the instance phase starts".into(),
            ));
        }
        let mut t = self.clone();
        t.config.variant = variant;
        t.config.seed = seed;
        t.rng = seeds::rng(seed, 7);
        t.log.clear();
        let config = FieldConfig {
            embed_dim: embed_dim.unwrap_or(self.fields.embed_dim()),
            ..self.fields.config().clone()
        };
        let fields = Fields::new(config)?;
        let fresh = fields.init_store(seed);
        let mut store = fields.empty_store();
        let mut adam = Adam::new(store.len());
        for name in SliceName::ALL {
            let instance = matches!(name, SliceName::InstanceFast | SliceName::InstanceSlow);
            let src = if instance { &fresh } else { &self.store };
            store.slice_mut(name).copy_from_slice(src.slice(name));
            store.set_trainable(name, self.store.is_trainable(name));
            if !instance {
                let (src, dst) = (self.store.range(name), store.range(name));
                adam.m[dst.clone()].copy_from_slice(&self.adam.m[src.clone()]);
                adam.v[dst].copy_from_slice(&self.adam.v[src]);
                if let Some(&s) = self.adam.steps.get(&name) {
                    adam.steps.insert(name, s);
                }
            }
        }
        t.fields = fields;
        t.store = store;
        t.adam = adam;
        Ok(t)
    }

    /// Swaps the 2D instance labels (same cameras, colors and semantics),
    /// e.g. to continue from a shared geometry phase with another noise draw.
    pub fn with_data(mut self, data: Arc<TrainData>) -> Result<Trainer> {
        data.validate()?;
        let same = data.views.len() == self.data.views.len()
            && data
                .views
                .iter()
                .zip(&self.data.views)
                .all(|(a, b)| a.camera == b.camera && a.rgb == b.rgb && a.semantic == b.semantic);
        if !same || data.num_classes != self.data.num_classes {
            return Err(LiftError::Config(
                "replacement data must keep cameras, colors and semantics".into(),
            ));
        }
        let mut rng = seeds::rng(self.config.seed, 8);
        self.thing_pixels = data
            .views
            .iter()
            .map(|v| {
                let n = v.camera.num_pixels() as u32;
                PixelOrder::new((0..n).filter(|&p| data.is_thing(v, p as usize)).collect(), &mut rng)
            })
            .collect();
        self.data = data;
        Ok(self)
    }

    /// Same trainer with another RBF bandwidth for the instance loss.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Trainer> {
        if self.instance_started {
            return Err(LiftError::Config("set gamma before the instance phase starts".into()));
        }
        self.config.gamma = gamma;
        self.config.validate()?;
        Ok(self)
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.iter < iteration.min(self.config.iterations) {
            self.step()?;
        }
        Ok(())
    }

    fn start_instance_phase(&mut self) {
        self.store
            .copy_slice(SliceName::InstanceFast, SliceName::InstanceSlow)
            .expect("fast and slow share a layout");
        if self.config.freeze_geometry {
            for s in [SliceName::DensityGrid, SliceName::ColorGrid, SliceName::ColorMlp] {
                self.store.set_trainable(s, false);
            }
            let march_cfg = self.config.render_march();
            let views = self
                .data
                .views
                .iter()
                .map(|v| {
                    (0..v.camera.num_pixels())
                        .map(|p| {
                            let ray = v.camera.pixel_center_ray(p % v.camera.width, p / v.camera.width);
                            march(&self.fields, &self.store, &ray, &march_cfg, SampleMode::Uniform)
                                .compact()
                        })
                        .collect()
                })
                .collect();
            self.cache = Some(Arc::new(RayCache { views }));
        }
        self.instance_started = true;
    }

    /// One optimization step on the next image in round-robin order.
    pub fn step(&mut self) -> Result<LogRow> {
        let cfg = self.config.clone();
        let t = self.iter;
        let semantic_on = t >= cfg.semantic_iter();
        let instance_on = t >= cfg.instance_iter();
        if instance_on && !self.instance_started {
            self.start_instance_phase();
        }
        let frozen = self.cache.is_some();
        let vi = t % self.data.views.len();
        let data = Arc::clone(&self.data);
        let view = &data.views[vi];
        let mut grad = self.store.zero_grad();
        let mut row = LogRow {
            iter: t,
            ..LogRow::default()
        };
        let pixels = self.all_pixels[vi].take(cfg.rgb_batch, &mut self.rng);
        let sem_labels: Vec<u32> = pixels.iter().map(|&p| view.semantic[p]).collect();
        let mut active: Vec<SliceName> = Vec::new();
        if !frozen {
            let march_cfg = cfg.march();
            let rays: Vec<MarchedRay> = pixels
                .iter()
                .map(|&p| {
                    let ray = view.camera.pixel_center_ray(p % view.camera.width, p / view.camera.width);
                    let mode = if cfg.stratified {
                        SampleMode::Stratified(seeds::mix(cfg.seed, ((t as u64) << 24) | p as u64))
                    } else {
                        SampleMode::Uniform
                    };
                    march(&self.fields, &self.store, &ray, &march_cfg, mode)
                })
                .collect();
            let targets: Vec<Vec3> = pixels.iter().map(|&p| view.rgb[p]).collect();
            let losses = geometry_objective(
                &self.fields,
                &self.store,
                &rays,
                &targets,
                semantic_on.then_some(&sem_labels[..]),
                (cfg.weight_rgb, cfg.weight_semantic),
                &mut grad,
            )?;
            row.loss_rgb = Some(losses.rgb);
            row.loss_sem = losses.semantic;
            active.extend([SliceName::DensityGrid, SliceName::ColorGrid, SliceName::ColorMlp]);
        } else if semantic_on {
            let cache = self.cache.as_ref().expect("frozen implies cached");
            let rays: Vec<CompactRay> = pixels.iter().map(|&p| cache.views[vi][p].clone()).collect();
            let mut sw = SemanticWork::default();
            row.loss_sem = Some(semantic_objective(
                &self.fields,
                &self.store,
                &rays,
                &sem_labels,
                cfg.weight_semantic,
                &mut grad,
                &mut sw,
            )?);
        }
        if semantic_on {
            active.push(SliceName::Semantic);
        }
        if instance_on {
            let things = self.thing_pixels[vi].take(cfg.instance_batch, &mut self.rng);
            if things.len() >= 2 {
                let rays: Vec<CompactRay> = match &self.cache {
                    Some(c) => things.iter().map(|&p| c.views[vi][p].clone()).collect(),
                    None => things
                        .iter()
                        .map(|&p| {
                            let ray = view.camera.pixel_center_ray(p % view.camera.width, p / view.camera.width);
                            march(&self.fields, &self.store, &ray, &cfg.march(), SampleMode::Uniform)
                                .compact()
                        })
                        .collect(),
                };
                let labels: Vec<u32> = things.iter().map(|&p| view.instance[p]).collect();
                let (a, b) = split_batch(things.len(), &mut self.rng);
                let batch = InstanceBatch {
                    rays: &rays,
                    labels: &labels,
                    image: vi,
                    split: Some((&a, &b)),
                };
                let stats = instance_objective(
                    &self.fields,
                    &self.store,
                    &batch,
                    &cfg.instance_loss(),
                    cfg.weight_instance,
                    &mut grad,
                    &mut self.works,
                )?;
                let r = self.store.range(SliceName::InstanceFast);
                row.loss_inst = Some(stats.value);
                row.skipped_frac = Some(stats.skipped_frac);
                row.grad_rvar = grad_relative_variance(&grad[r]);
                active.push(SliceName::InstanceFast);
            }
        }
        for (name, v) in [("rgb", row.loss_rgb), ("semantic", row.loss_sem), ("instance", row.loss_inst)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(LiftError::Diverged {
                    iteration: t,
                    loss: name,
                });
            }
        }
        let lrs: Vec<(SliceName, f64)> = active.iter().map(|&s| (s, cfg.lr(s))).collect();
        adam_step(&mut self.store, &mut self.adam, &grad, &lrs)?;
        if instance_on && cfg.variant.uses_slow() {
            let fast = self.store.slice(SliceName::InstanceFast).to_vec();
            ema_update(self.store.slice_mut(SliceName::InstanceSlow), &fast, cfg.ema_momentum)?;
        }
        self.iter += 1;
        self.log.push(row.clone());
        Ok(row)
    }
}

/// Trains from scratch for `config.iterations` steps.
pub fn train(
    fields: Fields,
    data: Arc<TrainData>,
    config: TrainConfig,
) -> Result<(Fields, ParamStore, Vec<LogRow>)> {
    let store = fields.init_store(config.seed);
    let mut trainer = Trainer::new(fields, store, data, config)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ema_examples() {
        let mut s = vec![0.3, -1.0];
        ema_update(&mut s, &[0.3, -1.0], 0.9).unwrap();
        assert_eq!(s, vec![0.3, -1.0]);
        let mut s = vec![0.0];
        ema_update(&mut s, &[1.0], 0.9).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-15);
        assert!(ema_update(&mut s, &[1.0, 2.0], 0.9).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut s = vec![0.0];
        let mut gap = 1.0;
        for _ in 0..20 {
            ema_update(&mut s, &[1.0], 0.9).unwrap();
            let g = 1.0 - s[0];
            assert!((g - 0.9 * gap).abs() < 1e-12);
            gap = g;
        }
    }

    #[test]
    fn split_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = split_batch(2, &mut rng);
        assert_eq!((a.len(), b.len()), (1, 1));
        let (a, b) = split_batch(7, &mut rng);
        assert_eq!((a.len(), b.len()), (4, 3));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            for i in split_batch(6, &mut rng).0 {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.5).abs() < 0.02);
        }
    }

    fn one_param_store() -> ParamStore {
        ParamStore::with_layout(&[(SliceName::InstanceFast, 1), (SliceName::InstanceSlow, 1)])
    }

    #[test]
    fn adam_first_step() {
        let mut store = one_param_store();
        store.slice_mut(SliceName::InstanceFast)[0] = 2.0;
        store.slice_mut(SliceName::InstanceSlow)[0] = 5.0;
        let mut adam = Adam::new(2);
        let lrs = [(SliceName::InstanceFast, 0.1), (SliceName::InstanceSlow, 0.1)];
        adam_step(&mut store, &mut adam, &[1.0, 1.0], &lrs).unwrap();
        assert!((store.values()[0] - 1.9).abs() < 1e-6);
        assert_eq!(store.values()[1], 5.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = one_param_store();
        store.slice_mut(SliceName::InstanceFast)[0] = 0.7;
        let before = store.clone();
        let mut adam = Adam::new(2);
        adam_step(&mut store, &mut adam, &[0.0, 0.0], &[(SliceName::InstanceFast, 0.1)]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut store = one_param_store();
        let mut adam = Adam::new(2);
        let r = adam_step(&mut store, &mut adam, &[f64::NAN, 0.0], &[(SliceName::InstanceFast, 0.1)]);
        assert!(matches!(r, Err(LiftError::NonFiniteGradient { slice: "instance-fast-mlp" })));
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            semantic_start: 0.5,
            instance_start: 0.2,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            ema_momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
    }
}
