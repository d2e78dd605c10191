//! Post-hoc baselines that make independent per-view segmentations
//! consistent by chaining Hungarian matches between frames.
//!
//! All trackers only rename segments: a pixel's new ID is a function of its
//! old ID within the same frame, and 0 stays 0.

mod hungarian;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian, Assignment};

use crate::error::{LiftError, Result};
use crate::geometry::{dist2, Vec3};
use crate::image::{DepthMap, LabelMap};
use crate::rendering::Camera;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Matches with a lower IoU start a new track (IoU and warp trackers).
    pub min_iou: f64,
    /// Minimum fraction of a segment's points near a fused set (point-cloud tracker).
    pub min_overlap: f64,
    /// Proximity radius of the point-cloud tracker, in world units.
    pub radius: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            min_iou: 0.1,
            min_overlap: 0.1,
            radius: 0.085,
        }
    }
}

/// Sorted nonzero IDs and their pixel counts.
fn segments(map: &LabelMap) -> BTreeMap<u32, usize> {
    let mut s = BTreeMap::new();
    for &v in &map.data {
        if v != 0 {
            *s.entry(v).or_insert(0) += 1;
        }
    }
    s
}

fn check_shapes(frames: &[LabelMap]) -> Result<()> {
    if let Some(f) = frames.first() {
        if frames.iter().any(|g| !g.same_shape(f)) {
            return Err(LiftError::DimensionMismatch(
                "label maps in a sequence must share their size".into(),
            ));
        }
    }
    Ok(())
}

fn relabel(map: &LabelMap, ids: &HashMap<u32, u32>) -> LabelMap {
    LabelMap {
        width: map.width,
        height: map.height,
        data: map
            .data
            .iter()
            .map(|&v| if v == 0 { 0 } else { ids[&v] })
            .collect(),
    }
}

/// IoU between every segment of `prev` (rows) and `next` (columns); pixels
/// are aligned by index and 0 is void.
fn iou_matrix(prev: &LabelMap, next: &LabelMap) -> (Vec<u32>, Vec<u32>, Vec<Vec<f64>>) {
    let a = segments(prev);
    let b = segments(next);
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &q) in prev.data.iter().zip(&next.data) {
        if p != 0 && q != 0 {
            *inter.entry((p, q)).or_insert(0) += 1;
        }
    }
    let rows: Vec<u32> = a.keys().copied().collect();
    let cols: Vec<u32> = b.keys().copied().collect();
    let m = rows
        .iter()
        .map(|r| {
            cols.iter()
                .map(|c| {
                    let i = inter.get(&(*r, *c)).copied().unwrap_or(0);
                    if i == 0 {
                        0.0
                    } else {
                        i as f64 / (a[r] + b[c] - i) as f64
                    }
                })
                .collect()
        })
        .collect();
    (rows, cols, m)
}

/// Chains `next` onto `prev_global` (prev's IDs already global) given an IoU
/// matrix computed in prev's image; returns next's local → global map.
fn chain(
    prev_map: &LabelMap,
    prev_global: &HashMap<u32, u32>,
    compared: &LabelMap,
    next_ids: &BTreeMap<u32, usize>,
    min_iou: f64,
    fresh: &mut u32,
) -> Result<HashMap<u32, u32>> {
    let (rows, cols, iou) = iou_matrix(prev_map, compared);
    let mut out = HashMap::new();
    if !rows.is_empty() && !cols.is_empty() {
        let cost: Vec<Vec<f64>> = iou
            .iter()
            .map(|r| r.iter().map(|v| 1.0 - v).collect())
            .collect();
        for (r, c) in hungarian(&cost)?.pairs() {
            let v = iou[r][c];
            if v > 0.0 && v >= min_iou {
                out.insert(cols[c], prev_global[&rows[r]]);
            }
        }
    }
    for &id in next_ids.keys() {
        out.entry(id).or_insert_with(|| {
            *fresh += 1;
            *fresh
        });
    }
    Ok(out)
}

fn first_frame(map: &LabelMap, fresh: &mut u32) -> HashMap<u32, u32> {
    segments(map)
        .keys()
        .map(|&id| {
            *fresh += 1;
            (id, *fresh)
        })
        .collect()
}

/// Method (1): Hungarian matching of consecutive frames on 1 - IoU.
pub fn track_iou(frames: &[LabelMap], config: &TrackConfig) -> Result<Vec<LabelMap>> {
    track_with(frames, config, |_, next| Ok(next.clone()))
}

fn track_with(
    frames: &[LabelMap],
    config: &TrackConfig,
    mut compare: impl FnMut(usize, &LabelMap) -> Result<LabelMap>,
) -> Result<Vec<LabelMap>> {
    check_shapes(frames)?;
    let mut fresh = 0u32;
    let mut out = Vec::with_capacity(frames.len());
    let mut prev: Option<HashMap<u32, u32>> = None;
    for (i, f) in frames.iter().enumerate() {
        let ids = match &prev {
            None => first_frame(f, &mut fresh),
            Some(g) => {
                let compared = compare(i, f)?;
                chain(&frames[i - 1], g, &compared, &segments(f), config.min_iou, &mut fresh)?
            }
        };
        out.push(relabel(f, &ids));
        prev = Some(ids);
    }
    Ok(out)
}

fn check_geometry(frames: &[LabelMap], depths: &[DepthMap], cameras: &[Camera]) -> Result<()> {
    if depths.len() != frames.len() || cameras.len() != frames.len() {
        return Err(LiftError::LengthMismatch {
            expected: frames.len(),
            actual: depths.len().min(cameras.len()),
        });
    }
    for ((f, d), c) in frames.iter().zip(depths).zip(cameras) {
        if d.width != f.width || d.height != f.height || c.width != f.width || c.height != f.height {
            return Err(LiftError::DimensionMismatch(
                "labels, depth and camera must agree on the image size".into(),
            ));
        }
    }
    Ok(())
}

/// World point seen at pixel `p` (depth is distance along the pixel ray).
fn unproject(camera: &Camera, depth: &DepthMap, p: usize) -> Option<Vec3> {
    let t = depth.data[p];
    if !t.is_finite() || t <= 0.0 {
        return None;
    }
    let ray = camera.pixel_center_ray(p % camera.width, p / camera.width);
    Some(ray.at(t as f64))
}

/// Labels of `src` seen from `dst_cam`: every labelled pixel with a valid
/// depth is moved to where it projects, nearest surface wins, and pixels
/// leaving the image are dropped.
pub fn warp_labels(src: &LabelMap, src_depth: &DepthMap, src_cam: &Camera, dst_cam: &Camera) -> LabelMap {
    let mut out = LabelMap::new(dst_cam.width, dst_cam.height);
    let mut zbuf = vec![f64::INFINITY; out.len()];
    for (p, &id) in src.data.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let Some(x) = unproject(src_cam, src_depth, p) else { continue };
        let Some((u, v, z)) = dst_cam.project(x) else { continue };
        if !(u >= 0.0 && v >= 0.0 && u < dst_cam.width as f64 && v < dst_cam.height as f64) {
            continue;
        }
        let q = v as usize * dst_cam.width + u as usize;
        if z < zbuf[q] {
            zbuf[q] = z;
            out.data[q] = id;
        }
    }
    out
}

/// Method (2): like [`track_iou`], but frame i+1 is warped into frame i with
/// the depth maps before computing IoUs.
pub fn track_warp(
    frames: &[LabelMap],
    depths: &[DepthMap],
    cameras: &[Camera],
    config: &TrackConfig,
) -> Result<Vec<LabelMap>> {
    check_geometry(frames, depths, cameras)?;
    track_with(frames, config, |i, next| {
        Ok(warp_labels(next, &depths[i], &cameras[i], &cameras[i - 1]))
    })
}

/// Points of every fused track bucketed into cubes of side `radius`.
struct PointIndex {
    radius: f64,
    cells: HashMap<[i64; 3], Vec<(Vec3, u32)>>,
}

impl PointIndex {
    fn cell(&self, x: Vec3) -> [i64; 3] {
        x.map(|v| (v / self.radius).floor() as i64)
    }

    fn insert(&mut self, x: Vec3, id: u32) {
        let c = self.cell(x);
        self.cells.entry(c).or_default().push((x, id));
    }

    /// Tracks with a point within `radius` of x.
    fn near(&self, x: Vec3, found: &mut Vec<u32>) {
        found.clear();
        let c = self.cell(x);
        let r2 = self.radius * self.radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(pts) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for (p, id) in pts {
                        if !found.contains(id) && dist2(p, &x) <= r2 {
                            found.push(*id);
                        }
                    }
                }
            }
        }
    }
}

/// Method (3): segments are lifted to 3D and matched against point sets fused
/// over all earlier frames, so objects survive occlusion gaps.
pub fn track_pointcloud(
    frames: &[LabelMap],
    depths: &[DepthMap],
    cameras: &[Camera],
    config: &TrackConfig,
) -> Result<Vec<LabelMap>> {
    check_shapes(frames)?;
    check_geometry(frames, depths, cameras)?;
    if !(config.radius > 0.0) {
        return Err(LiftError::Config("point-cloud radius must be positive".into()));
    }
    let mut index = PointIndex {
        radius: config.radius,
        cells: HashMap::new(),
    };
    let mut tracks: Vec<u32> = Vec::new();
    let mut out = Vec::with_capacity(frames.len());
    let mut found = Vec::new();
    for (f, (depth, cam)) in frames.iter().zip(depths.iter().zip(cameras)) {
        let segs = segments(f);
        let seg_ids: Vec<u32> = segs.keys().copied().collect();
        let row: HashMap<u32, usize> = seg_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut points: Vec<Vec<Vec3>> = vec![Vec::new(); seg_ids.len()];
        let mut hits = vec![vec![0usize; tracks.len()]; seg_ids.len()];
        for (p, &id) in f.data.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let Some(x) = unproject(cam, depth, p) else { continue };
            let r = row[&id];
            points[r].push(x);
            index.near(x, &mut found);
            for &t in &found {
                hits[r][t as usize - 1] += 1;
            }
        }
        let frac: Vec<Vec<f64>> = hits
            .iter()
            .zip(&points)
            .map(|(h, pts)| {
                h.iter()
                    .map(|&n| if pts.is_empty() { 0.0 } else { n as f64 / pts.len() as f64 })
                    .collect()
            })
            .collect();
        let mut ids: HashMap<u32, u32> = HashMap::new();
        if !seg_ids.is_empty() && !tracks.is_empty() {
            let cost: Vec<Vec<f64>> = frac
                .iter()
                .map(|r| r.iter().map(|v| 1.0 - v).collect())
                .collect();
            for (r, c) in hungarian(&cost)?.pairs() {
                let v = frac[r][c];
                if v > 0.0 && v >= config.min_overlap {
                    ids.insert(seg_ids[r], tracks[c]);
                }
            }
        }
        for (r, &id) in seg_ids.iter().enumerate() {
            let global = *ids.entry(id).or_insert_with(|| {
                tracks.push(tracks.len() as u32 + 1);
                tracks.len() as u32
            });
            for &x in &points[r] {
                index.insert(x, global);
            }
        }
        out.push(relabel(f, &ids));
    }
    Ok(out)
}
