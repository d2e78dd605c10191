//! Cameras, rays, sampling and the volume-rendering projection.
//!
//! Rendering is split into a cheap geometric march (density only) and payload
//! passes over the kept samples. Instance and semantic payloads never push
//! gradients into density, so they work on a [`CompactRay`] that only keeps
//! positions and weights; that is also what gets cached when geometry is frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::fields::{
    freq_encode, Branch, ColorTrace, Corners, Fields, MlpTrace, ParamStore, SemanticTrace,
    SliceName,
};
use crate::geometry::{add, cross, mat_t_vec, mat_vec, normalize, scale, sub, Aabb, Vec3};

/// Pinhole camera in the OpenCV convention: x right, y down, z forward.
/// `rotation`/`translation` map camera coordinates to world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        rotation: [[f64; 3]; 3],
        translation: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            rotation,
            translation,
            focal,
            principal: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` roughly the world up.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LiftError::Config("look_at: up is parallel to the view axis".into()));
        }
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Camera::new(rotation, eye, focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !((d - want).abs() <= 1e-6) {
                    return Err(LiftError::Config(format!(
                        "camera rotation is not orthonormal (R Rt[{i}][{j}] = {d})"
                    )));
                }
            }
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(LiftError::Config(
                "camera needs a positive focal length and image size".into(),
            ));
        }
        if self.translation.iter().chain(&self.principal).any(|v| !v.is_finite()) {
            return Err(LiftError::Config("camera has non-finite values".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Ray through image point `u` (continuous pixel coordinates; the centre
    /// of pixel (i, j) is (i + 0.5, j + 0.5)). Near/far are left unbounded.
    pub fn pixel_ray(&self, u: [f64; 2]) -> Ray {
        let d_cam = [
            (u[0] - self.principal[0]) / self.focal,
            (u[1] - self.principal[1]) / self.focal,
            1.0,
        ];
        Ray {
            origin: self.translation,
            dir: normalize(mat_vec(&self.rotation, d_cam)),
            near: 0.0,
            far: f64::INFINITY,
        }
    }

    pub fn pixel_center_ray(&self, px: usize, py: usize) -> Ray {
        self.pixel_ray([px as f64 + 0.5, py as f64 + 0.5])
    }

    /// World point to (u, v, depth along the optical axis); None behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = mat_t_vec(&self.rotation, sub(p, self.translation));
        if c[2] <= 1e-12 {
            return None;
        }
        Some((
            self.focal * c[0] / c[2] + self.principal[0],
            self.focal * c[1] / c[2] + self.principal[1],
            c[2],
        ))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }

    /// Restricts the ray to the part inside `bounds`; None if it misses.
    pub fn clip(&self, bounds: &Aabb) -> Option<Ray> {
        let (t0, t1) = bounds.intersect(self.origin, self.dir)?;
        let near = t0.max(self.near);
        let far = t1.min(self.far);
        (far > near).then_some(Ray { near, far, ..*self })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Uniform,
    Stratified(u64),
}

/// Sample parameters along a ray and the interval each one stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Uniform mode puts N samples evenly on [near, far]; the last sample's
/// interval is the spacing itself. Stratified mode splits [near, far] into N
/// bins and draws one point in each.
pub fn sample_points(ray: &Ray, n: usize, mode: SampleMode) -> RaySamples {
    assert!(n >= 2, "need at least two samples per ray");
    assert!(ray.far.is_finite() && ray.far > ray.near, "ray must be clipped first");
    let len = ray.far - ray.near;
    let t: Vec<f64> = match mode {
        SampleMode::Uniform => {
            let step = len / (n - 1) as f64;
            (0..n).map(|i| ray.near + step * i as f64).collect()
        }
        SampleMode::Stratified(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bin = len / n as f64;
            (0..n)
                .map(|i| ray.near + bin * (i as f64 + rng.random::<f64>()))
                .collect()
        }
    };
    let spacing = match mode {
        SampleMode::Uniform => len / (n - 1) as f64,
        SampleMode::Stratified(_) => len / n as f64,
    };
    let mut delta: Vec<f64> = t.windows(2).map(|w| (w[1] - w[0]).max(1e-12)).collect();
    delta.push(spacing);
    RaySamples { t, delta }
}

/// τ_0..τ_N with τ_i = exp(-Σ_{j<i} σ_j δ_j).
pub fn transmittances(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len() + 1);
    let mut acc = 0.0;
    out.push(1.0);
    for (s, d) in sigma.iter().zip(delta) {
        acc += s * d;
        out.push((-acc).exp());
    }
    out
}

/// w_i = τ_i (1 - exp(-σ_i δ_i))
pub fn weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let tau = transmittances(sigma, delta);
    sigma
        .iter()
        .zip(delta)
        .enumerate()
        .map(|(i, (s, d))| tau[i] * -(-s * d).exp_m1())
        .collect()
}

/// Σ w_i f_i for a payload with `channels` values per sample (row-major).
pub fn render(values: &[f64], channels: usize, sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), sigma.len() * channels);
    let w = weights(sigma, delta);
    let mut out = vec![0.0; channels];
    for (i, wi) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[i * channels..(i + 1) * channels]) {
            *o += wi * v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct MarchedSample {
    pub x: Vec3,
    pub delta: f64,
    pub sigma: f64,
    /// d sigma / d raw density at this point
    pub dsigma: f64,
    pub corners: Option<Corners>,
    /// transmittance before this sample
    pub tau: f64,
    pub weight: f64,
    pub kept: bool,
}

/// A ray after evaluating density at every sample.
#[derive(Debug, Clone)]
pub struct MarchedRay {
    pub dir: Vec3,
    pub samples: Vec<MarchedSample>,
}

impl MarchedRay {
    pub fn opacity(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }

    pub fn kept(&self) -> impl Iterator<Item = &MarchedSample> {
        self.samples.iter().filter(|s| s.kept)
    }

    pub fn compact(&self) -> CompactRay {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for s in self.kept() {
            points.push(s.x);
            weights.push(s.weight);
        }
        CompactRay {
            dir: self.dir,
            points,
            weights,
        }
    }
}

/// Kept sample positions and their (constant) weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompactRay {
    pub dir: Vec3,
    pub points: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl CompactRay {
    pub fn opacity(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Marching parameters. Samples whose weight is below `cull` are skipped by
/// every payload pass, forward and backward alike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchConfig {
    pub samples: usize,
    pub cull: f64,
}

impl Default for MarchConfig {
    fn default() -> Self {
        MarchConfig {
            samples: 64,
            cull: 1e-4,
        }
    }
}

/// Clips `ray` to the field box and evaluates density along it. Rays missing
/// the box produce an empty march.
pub fn march(
    fields: &Fields,
    store: &ParamStore,
    ray: &Ray,
    cfg: &MarchConfig,
    mode: SampleMode,
) -> MarchedRay {
    let Some(clipped) = ray.clip(fields.bounds()) else {
        return MarchedRay {
            dir: ray.dir,
            samples: Vec::new(),
        };
    };
    let rs = sample_points(&clipped, cfg.samples, mode);
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut acc = 0.0f64;
    for (&t, &delta) in rs.t.iter().zip(&rs.delta) {
        let x = clipped.at(t);
        let d = fields.density_sample(store, x);
        let tau = (-acc).exp();
        let weight = tau * -(-d.sigma * delta).exp_m1();
        acc += d.sigma * delta;
        samples.push(MarchedSample {
            x,
            delta,
            sigma: d.sigma,
            dsigma: d.dsigma,
            corners: d.corners,
            tau,
            weight,
            kept: weight >= cfg.cull && weight > 0.0,
        });
    }
    MarchedRay {
        dir: ray.dir,
        samples,
    }
}

/// Pushes d loss / d sigma_j = δ_j (τ_{j+1} h_j - Σ_{i>j} w_i h_i) into the
/// density grid, where h_i = <dL/d rendered, f_i> (zero for culled samples).
pub fn density_backward(
    fields: &Fields,
    store: &ParamStore,
    ray: &MarchedRay,
    h: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(h.len(), ray.samples.len());
    let range = store.range(SliceName::DensityGrid);
    let gd = &mut grad[range];
    let mut tail = 0.0;
    for (j, s) in ray.samples.iter().enumerate().rev() {
        let after = s.tau * (-s.sigma * s.delta).exp();
        let dl_dsigma = s.delta * (after * h[j] - tail);
        tail += s.weight * h[j];
        if let Some(c) = &s.corners {
            if dl_dsigma != 0.0 && s.dsigma != 0.0 {
                fields.density.scatter(c, &[dl_dsigma * s.dsigma], gd);
            }
        }
    }
}

/// Workspace for a color forward/backward pass over one ray.
#[derive(Debug, Clone, Default)]
pub struct ColorWork {
    encoded: Vec<f64>,
    traces: Vec<ColorTrace>,
    colors: Vec<Vec3>,
}

pub fn render_color(
    fields: &Fields,
    store: &ParamStore,
    ray: &MarchedRay,
    work: &mut ColorWork,
) -> Vec3 {
    freq_encode(ray.dir, fields.config().dir_freqs, &mut work.encoded);
    let kept = ray.kept().count();
    if work.traces.len() < kept {
        work.traces.resize_with(kept, ColorTrace::default);
    }
    work.colors.clear();
    let mut out = [0.0; 3];
    for (k, s) in ray.kept().enumerate() {
        let c = fields.color_forward(store, s.x, &work.encoded, &mut work.traces[k]);
        work.colors.push(c);
        for ch in 0..3 {
            out[ch] += s.weight * c[ch];
        }
    }
    out
}

/// Backward of [`render_color`]; must follow it with the same `work`.
pub fn color_backward(
    fields: &Fields,
    store: &ParamStore,
    ray: &MarchedRay,
    work: &ColorWork,
    grad_rgb: Vec3,
    grad: &mut [f64],
    scratch: &mut Vec<f64>,
    density: bool,
) {
    let mut h = vec![0.0; ray.samples.len()];
    let mut k = 0;
    for (j, s) in ray.samples.iter().enumerate() {
        if !s.kept {
            continue;
        }
        let c = work.colors[k];
        h[j] = (0..3).map(|ch| grad_rgb[ch] * c[ch]).sum();
        let g = scale(grad_rgb, s.weight);
        fields.color_backward(store, &work.traces[k], g, grad, scratch);
        k += 1;
    }
    if density {
        density_backward(fields, store, ray, &h, grad);
    }
}

#[derive(Debug, Clone, Default)]
pub struct InstanceWork {
    traces: Vec<MlpTrace>,
}

/// θ = Σ w_i e_i over the kept samples.
pub fn render_instance(
    fields: &Fields,
    store: &ParamStore,
    branch: Branch,
    ray: &CompactRay,
    work: &mut InstanceWork,
) -> Vec<f64> {
    let d = fields.embed_dim();
    if work.traces.len() < ray.points.len() {
        work.traces.resize_with(ray.points.len(), MlpTrace::default);
    }
    let mut out = vec![0.0; d];
    for (k, (&x, &w)) in ray.points.iter().zip(&ray.weights).enumerate() {
        let e = fields.instance_forward(store, branch, x, &mut work.traces[k]);
        for (o, v) in out.iter_mut().zip(e) {
            *o += w * v;
        }
    }
    out
}

/// Backward of [`render_instance`] on the fast branch.
pub fn instance_backward(
    fields: &Fields,
    store: &ParamStore,
    ray: &CompactRay,
    work: &InstanceWork,
    grad_embed: &[f64],
    grad: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let mut g = vec![0.0; grad_embed.len()];
    for (k, &w) in ray.weights.iter().enumerate() {
        for (gi, ge) in g.iter_mut().zip(grad_embed) {
            *gi = w * ge;
        }
        fields.instance_backward(store, &work.traces[k], &g, grad, scratch);
    }
}

#[derive(Debug, Clone, Default)]
pub struct SemanticWork {
    traces: Vec<SemanticTrace>,
}

/// Class distribution of a ray: Σ w_i p_i / Σ w_i over the kept samples.
/// None when nothing was kept.
pub fn render_semantic(
    fields: &Fields,
    store: &ParamStore,
    ray: &CompactRay,
    work: &mut SemanticWork,
) -> Option<Vec<f64>> {
    let total = ray.opacity();
    if !(total > 0.0) {
        return None;
    }
    if work.traces.len() < ray.points.len() {
        work.traces.resize_with(ray.points.len(), SemanticTrace::default);
    }
    let mut out = vec![0.0; fields.num_classes()];
    for (k, (&x, &w)) in ray.points.iter().zip(&ray.weights).enumerate() {
        let p = fields.semantic_forward(store, x, &mut work.traces[k]);
        for (o, v) in out.iter_mut().zip(p) {
            *o += w / total * v;
        }
    }
    Some(out)
}

pub fn semantic_backward(
    fields: &Fields,
    store: &ParamStore,
    ray: &CompactRay,
    work: &SemanticWork,
    grad_probs: &[f64],
    grad: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let total = ray.opacity();
    let mut g = vec![0.0; grad_probs.len()];
    for (k, &w) in ray.weights.iter().enumerate() {
        for (gi, gp) in g.iter_mut().zip(grad_probs) {
            *gi = w / total * gp;
        }
        fields.semantic_backward(store, &work.traces[k], &g, grad, scratch);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Payload {
    Color,
    InstanceFast,
    InstanceSlow,
    Semantic,
}

/// Plain projection of one payload through pixel `u`: uniform samples, no
/// culling, every payload composited with the raw weights over black.
pub fn render_pixel(
    fields: &Fields,
    store: &ParamStore,
    camera: &Camera,
    u: [f64; 2],
    payload: Payload,
    samples: usize,
) -> Vec<f64> {
    let ray = camera.pixel_ray(u);
    let cfg = MarchConfig { samples, cull: 0.0 };
    let m = march(fields, store, &ray, &cfg, SampleMode::Uniform);
    let channels = match payload {
        Payload::Color => 3,
        Payload::InstanceFast | Payload::InstanceSlow => fields.embed_dim(),
        Payload::Semantic => fields.num_classes(),
    };
    let mut out = vec![0.0; channels];
    let mut enc = Vec::new();
    freq_encode(m.dir, fields.config().dir_freqs, &mut enc);
    let mut ct = ColorTrace::default();
    let mut mt = MlpTrace::default();
    let mut st = SemanticTrace::default();
    for s in &m.samples {
        let v: Vec<f64> = match payload {
            Payload::Color => fields.color_forward(store, s.x, &enc, &mut ct).to_vec(),
            Payload::InstanceFast => fields
                .instance_forward(store, Branch::Fast, s.x, &mut mt)
                .to_vec(),
            Payload::InstanceSlow => fields
                .instance_forward(store, Branch::Slow, s.x, &mut mt)
                .to_vec(),
            Payload::Semantic => fields.semantic_forward(store, s.x, &mut st).to_vec(),
        };
        for (o, x) in out.iter_mut().zip(v) {
            *o += s.weight * x;
        }
    }
    out
}
