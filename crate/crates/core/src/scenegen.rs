//! Analytic multi-view scenes with exact ground truth, and a label-noise
//! model standing in for an inconsistent per-view 2D segmenter.
//!
//! Scenes are spheres and boxes resting on a finite checkerboard floor at
//! z = 0, seen by inward-facing cameras on a dome. Floor extent, camera
//! distance and focal length all grow with √(N/25), so the number of objects
//! per image stays roughly constant as N grows.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::geometry::{add, dot, normalize, scale, sub, Aabb, Vec3};
use crate::image::{DepthMap, Image, LabelMap};
use crate::rendering::{Camera, Ray};
use crate::seeds;

pub const BACKGROUND_CLASS: u32 = 0;
pub const FOREGROUND_CLASS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    #[default]
    OldRoom,
    LargeCorridor,
}

impl Theme {
    fn floor_colors(self) -> [Vec3; 2] {
        match self {
            Theme::OldRoom => [[0.58, 0.47, 0.36], [0.33, 0.26, 0.2]],
            Theme::LargeCorridor => [[0.62, 0.62, 0.64], [0.38, 0.39, 0.44]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: Vec3,
    pub color: Vec3,
    pub id: u32,
    pub class: u32,
}

impl SceneObject {
    /// Radius of the footprint's bounding circle on the floor.
    fn footprint(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => (half[0] * half[0] + half[1] * half[1]).sqrt(),
        }
    }

    fn top(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => self.center[2] + radius,
            Shape::Box { half } => self.center[2] + half[2],
        }
    }

    /// Smallest extent, used to derive merge radii for the 3D tracker.
    pub fn min_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => half[0].min(half[1]).min(half[2]),
        }
    }

    /// Nearest hit (t, outward normal) with t > 1e-9.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = sub(ray.origin, self.center);
                let b = dot(ray.dir, oc);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 1e-9 { -b - s } else { -b + s };
                (t > 1e-9).then(|| {
                    let p = ray.at(t);
                    (t, scale(sub(p, self.center), 1.0 / radius))
                })
            }
            Shape::Box { half } => {
                let bb = Aabb::new(sub(self.center, half), add(self.center, half));
                let (t0, _) = bb.intersect(ray.origin, ray.dir)?;
                if t0 <= 1e-9 {
                    return None;
                }
                let p = sub(ray.at(t0), self.center);
                // the face whose slab was entered last
                let axis = (0..3)
                    .max_by(|&a, &b| {
                        (p[a].abs() / half[a]).total_cmp(&(p[b].abs() / half[b]))
                    })
                    .unwrap_or(2);
                let mut n = [0.0; 3];
                n[axis] = p[axis].signum();
                Some((t0, n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub floor_half: f64,
    pub checker: f64,
    pub light: Vec3,
    pub ambient: f64,
    pub theme: Theme,
    /// Box enclosing floor and objects; the field lives here.
    pub bounds: Aabb,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub objects: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Fixed view count instead of the √N law.
    pub views: Option<usize>,
    /// Floor half-extent at N = 25.
    pub floor_half: f64,
    /// Camera distance from the scene centre at N = 25.
    pub camera_distance: f64,
    /// Focal length in pixels at N = 25.
    pub focal: f64,
    pub base_views: usize,
    pub max_views: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_gap: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub theme: Theme,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            objects: 8,
            seed: 0,
            width: 64,
            height: 64,
            views: None,
            floor_half: 1.6,
            camera_distance: 4.4,
            focal: 150.0,
            base_views: 24,
            max_views: 48,
            min_size: 0.17,
            max_size: 0.27,
            min_gap: 0.06,
            min_elevation_deg: 30.0,
            max_elevation_deg: 60.0,
            theme: Theme::OldRoom,
        }
    }
}

impl SceneConfig {
    pub fn scale(&self) -> f64 {
        (self.objects as f64 / 25.0).sqrt()
    }

    pub fn focal_length(&self) -> f64 {
        self.focal * self.scale()
    }

    pub fn view_count(&self) -> usize {
        self.views.unwrap_or_else(|| {
            let m = (self.base_views as f64 * self.scale()).round() as usize;
            m.clamp(1, self.max_views)
        })
    }

    pub fn floor_half_extent(&self) -> f64 {
        self.floor_half * self.scale()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LiftError::Config(m.to_string()));
        if self.objects == 0 {
            return bad("a scene needs at least one object");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.min_size > 0.0 && self.max_size >= self.min_size) {
            return bad("object sizes must satisfy 0 < min_size <= max_size");
        }
        if !(self.focal > 0.0 && self.camera_distance > 0.0 && self.floor_half > 0.0) {
            return bad("focal, camera_distance and floor_half must be positive");
        }
        Ok(())
    }
}

/// Places N non-overlapping objects and builds the camera dome.
pub fn make_scene(cfg: &SceneConfig) -> Result<(Scene, Vec<Camera>)> {
    cfg.validate()?;
    let mut rng = seeds::rng(cfg.seed, 1);
    let h = cfg.floor_half_extent();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.objects);
    let max_attempts = 2000 * cfg.objects;
    let mut attempts = 0;
    let hue0: f64 = rng.random();
    while objects.len() < cfg.objects {
        attempts += 1;
        if attempts > max_attempts {
            return Err(LiftError::Placement {
                objects: cfg.objects,
                attempts: max_attempts,
                half_extent: h,
            });
        }
        let r = rng.random_range(cfg.min_size..=cfg.max_size);
        let shape = if rng.random::<bool>() {
            Shape::Sphere { radius: r }
        } else {
            let hx = r * rng.random_range(0.65..=1.0);
            let hy = r * rng.random_range(0.65..=1.0);
            let hz = r * rng.random_range(0.8..=1.3);
            Shape::Box { half: [hx, hy, hz] }
        };
        let lift = match shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => half[2],
        };
        let i = objects.len();
        let hue = (hue0 + i as f64 * 0.618_033_988_75).fract();
        let mut obj = SceneObject {
            shape,
            center: [0.0, 0.0, lift],
            color: hsv(hue, rng.random_range(0.55..0.9), rng.random_range(0.75..1.0)),
            id: i as u32 + 1,
            class: FOREGROUND_CLASS,
        };
        let reach = h - obj.footprint();
        if reach <= 0.0 {
            continue;
        }
        obj.center[0] = rng.random_range(-reach..reach);
        obj.center[1] = rng.random_range(-reach..reach);
        let clear = objects.iter().all(|o| {
            let dx = o.center[0] - obj.center[0];
            let dy = o.center[1] - obj.center[1];
            (dx * dx + dy * dy).sqrt() >= o.footprint() + obj.footprint() + cfg.min_gap
        });
        if clear {
            objects.push(obj);
        }
    }
    let top = objects.iter().map(SceneObject::top).fold(0.0, f64::max);
    let margin = 0.05;
    let scene = Scene {
        objects,
        floor_half: h,
        checker: 0.2,
        light: normalize([0.45, 0.3, 0.84]),
        ambient: 0.3,
        theme: cfg.theme,
        bounds: Aabb::new([-h - margin, -h - margin, -0.08], [h + margin, h + margin, top + margin]),
        num_classes: 2,
    };
    let cameras = make_cameras(cfg, &mut rng)?;
    Ok((scene, cameras))
}

fn make_cameras(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Vec<Camera>> {
    let m = cfg.view_count();
    let dist = cfg.camera_distance * cfg.scale();
    let f = cfg.focal_length();
    let az0: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (e0, e1) = (
        cfg.min_elevation_deg.to_radians(),
        cfg.max_elevation_deg.to_radians(),
    );
    (0..m)
        .map(|k| {
            let az = az0 + std::f64::consts::TAU * k as f64 / m as f64;
            let el = e0 + (e1 - e0) * ((k as f64 * 0.618_033_988_75).fract());
            let eye = [
                dist * el.cos() * az.cos(),
                dist * el.cos() * az.sin(),
                dist * el.sin(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], f, cfg.width, cfg.height)
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> Vec3 {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// What a single ray sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub rgb: Vec3,
    pub id: u32,
    pub class: u32,
}

impl Scene {
    pub fn trace(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, Option<&SceneObject>)> = None;
        for o in &self.objects {
            if let Some((t, n)) = o.intersect(ray) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, n, Some(o)));
                }
            }
        }
        if ray.dir[2].abs() > 1e-12 {
            let t = -ray.origin[2] / ray.dir[2];
            let p = ray.at(t);
            if t > 1e-9
                && p[0].abs() <= self.floor_half
                && p[1].abs() <= self.floor_half
                && best.is_none_or(|b| t < b.0)
            {
                let n = if ray.dir[2] < 0.0 { [0.0, 0.0, 1.0] } else { [0.0, 0.0, -1.0] };
                best = Some((t, n, None));
            }
        }
        let (t, n, obj) = best?;
        let shade = self.ambient + (1.0 - self.ambient) * dot(n, self.light).max(0.0);
        let (base, id, class) = match obj {
            Some(o) => (o.color, o.id, o.class),
            None => {
                let p = ray.at(t);
                let cell = (p[0] / self.checker).floor() as i64 + (p[1] / self.checker).floor() as i64;
                (self.theme.floor_colors()[cell.rem_euclid(2) as usize], 0, BACKGROUND_CLASS)
            }
        };
        Some(Hit {
            t,
            rgb: scale(base, shade),
            id,
            class,
        })
    }
}

/// Exact renders of one view. The sky is black, like the field's background.
#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub rgb: Image,
    pub depth: DepthMap,
    pub instance: LabelMap,
    pub semantic: LabelMap,
}

pub fn render_gt(scene: &Scene, camera: &Camera) -> GtFrame {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut inst = Vec::with_capacity(w * h);
    let mut sem = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            match scene.trace(&camera.pixel_center_ray(px, py)) {
                Some(hit) => {
                    rgb.push(hit.rgb);
                    depth.push(hit.t as f32);
                    inst.push(hit.id);
                    sem.push(hit.class);
                }
                None => {
                    rgb.push([0.0; 3]);
                    depth.push(f32::INFINITY);
                    inst.push(0);
                    sem.push(BACKGROUND_CLASS);
                }
            }
        }
    }
    GtFrame {
        rgb: Image::from_f64(w, h, &rgb),
        depth: DepthMap {
            width: w,
            height: h,
            data: depth,
        },
        instance: LabelMap {
            width: w,
            height: h,
            data: inst,
        },
        semantic: LabelMap {
            width: w,
            height: h,
            data: sem,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseOpts {
    pub permute: bool,
    pub p_split: f64,
    pub p_flip: f64,
    pub seed: u64,
}

impl Default for NoiseOpts {
    fn default() -> Self {
        NoiseOpts {
            permute: true,
            p_split: 0.1,
            p_flip: 0.05,
            seed: 0,
        }
    }
}

impl NoiseOpts {
    pub fn none() -> Self {
        NoiseOpts {
            permute: false,
            p_split: 0.0,
            p_flip: 0.0,
            seed: 0,
        }
    }
}

/// Corrupts every view independently: split segments along a random
/// direction at the median, flip fg/fg boundary pixels to a neighbouring
/// segment, then relabel with a fresh random permutation. Background stays put.
pub fn corrupt_labels(maps: &[LabelMap], opts: &NoiseOpts) -> Result<Vec<LabelMap>> {
    for (name, p) in [("p_split", opts.p_split), ("p_flip", opts.p_flip)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(LiftError::Config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    Ok(maps
        .iter()
        .enumerate()
        .map(|(v, m)| corrupt_view(m, opts, &mut seeds::rng(opts.seed, 1000 + v as u64)))
        .collect())
}

fn corrupt_view(map: &LabelMap, opts: &NoiseOpts, rng: &mut impl Rng) -> LabelMap {
    let (w, h) = (map.width, map.height);
    let mut out = map.clone();
    let ids = map.ids();
    let mut next = ids.last().copied().unwrap_or(0) + 1;
    if opts.p_split > 0.0 {
        let mut pixels: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, &id) in map.data.iter().enumerate() {
            if id != 0 {
                pixels.entry(id).or_default().push(i);
            }
        }
        for id in &ids {
            let px = &pixels[id];
            // draws happen for every segment so the stream does not depend on outcomes
            let roll: f64 = rng.random();
            let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            if px.len() < 2 || roll >= opts.p_split {
                continue;
            }
            let (c, s) = (angle.cos(), angle.sin());
            let mut proj: Vec<(f64, usize)> = px
                .iter()
                .map(|&i| (c * (i % w) as f64 + s * (i / w) as f64, i))
                .collect();
            proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in &proj[px.len().div_ceil(2)..] {
                out.data[i] = next;
            }
            next += 1;
        }
    }
    if opts.p_flip > 0.0 {
        let before = out.data.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let id = before[i];
                if id == 0 {
                    continue;
                }
                let mut other = [0u32; 4];
                let mut n = 0;
                let neighbours = [
                    (x > 0).then(|| i - 1),
                    (x + 1 < w).then(|| i + 1),
                    (y > 0).then(|| i - w),
                    (y + 1 < h).then(|| i + w),
                ];
                for j in neighbours.into_iter().flatten() {
                    if before[j] != 0 && before[j] != id {
                        other[n] = before[j];
                        n += 1;
                    }
                }
                if n > 0 && rng.random::<f64>() < opts.p_flip {
                    out.data[i] = other[rng.random_range(0..n)];
                }
            }
        }
    }
    if opts.permute {
        let present = out.ids();
        let mut targets: Vec<u32> = (1..=present.len() as u32).collect();
        targets.shuffle(rng);
        let remap: HashMap<u32, u32> = present.into_iter().zip(targets).collect();
        for v in out.data.iter_mut() {
            if *v != 0 {
                *v = remap[v];
            }
        }
    }
    out
}

/// Mean number of distinct foreground IDs per view.
pub fn objects_per_image(maps: &[LabelMap]) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    maps.iter().map(|m| m.ids().len()).sum::<usize>() as f64 / maps.len() as f64
}
