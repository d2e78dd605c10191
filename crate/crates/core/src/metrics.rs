//! IoU, per-frame PQ, scene-level PQ over multi-view segment subsets, mIoU and PSNR.
//!
//! Instance ID 0 is void and never forms a segment. Segments only match
//! segments of the same semantic class (majority class of their pixels).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::geometry::Vec3;
use crate::image::LabelMap;

/// |a ∩ b| / |a ∪ b|, zero when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LiftError::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// An instance map with an optional semantic map. Without semantics every
/// segment belongs to class 0.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub instance: &'a LabelMap,
    pub semantic: Option<&'a LabelMap>,
}

impl<'a> Frame<'a> {
    pub fn new(instance: &'a LabelMap, semantic: Option<&'a LabelMap>) -> Self {
        Frame { instance, semantic }
    }

    pub fn instances(instance: &'a LabelMap) -> Self {
        Frame {
            instance,
            semantic: None,
        }
    }

    fn check(&self) -> Result<()> {
        if let Some(s) = self.semantic {
            if !s.same_shape(self.instance) {
                return Err(LiftError::DimensionMismatch(format!(
                    "semantic map {}x{} vs instance map {}x{}",
                    s.width, s.height, self.instance.width, self.instance.height
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub class: u32,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_class: Vec<ClassPq>,
    /// (pred id, gt id, IoU) of every match
    #[serde(skip)]
    pub matches: Vec<(u32, u32, f64)>,
}

/// Σ IoU / (TP + FP/2 + FN/2), with the empty-vs-empty case scoring 1.
fn quality(sum_iou: f64, tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    if denom == 0.0 {
        return (1.0, 1.0, 1.0);
    }
    let sq = if tp == 0 { 0.0 } else { sum_iou / tp as f64 };
    (sum_iou / denom, sq, tp as f64 / denom)
}

/// Pixel counts gathered over one or more frames.
#[derive(Default)]
struct Tally {
    pred_area: HashMap<u32, usize>,
    gt_area: HashMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
    pred_class: HashMap<u32, BTreeMap<u32, usize>>,
    gt_class: HashMap<u32, BTreeMap<u32, usize>>,
}

impl Tally {
    fn add(&mut self, pred: &Frame, gt: &Frame) -> Result<()> {
        pred.check()?;
        gt.check()?;
        if !pred.instance.same_shape(gt.instance) {
            return Err(LiftError::DimensionMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.instance.width, pred.instance.height, gt.instance.width, gt.instance.height
            )));
        }
        for i in 0..pred.instance.len() {
            let p = pred.instance.data[i];
            let g = gt.instance.data[i];
            if p != 0 {
                *self.pred_area.entry(p).or_default() += 1;
                let c = pred.semantic.map_or(0, |s| s.data[i]);
                *self.pred_class.entry(p).or_default().entry(c).or_default() += 1;
            }
            if g != 0 {
                *self.gt_area.entry(g).or_default() += 1;
                let c = gt.semantic.map_or(0, |s| s.data[i]);
                *self.gt_class.entry(g).or_default().entry(c).or_default() += 1;
            }
            if p != 0 && g != 0 {
                *self.inter.entry((p, g)).or_default() += 1;
            }
        }
        Ok(())
    }

    fn report(&self) -> PqReport {
        let majority = |m: &BTreeMap<u32, usize>| {
            // ties go to the smallest class
            m.iter()
                .fold((0u32, 0usize), |best, (&c, &n)| if n > best.1 { (c, n) } else { best })
                .0
        };
        let pred_cls: HashMap<u32, u32> =
            self.pred_class.iter().map(|(&id, m)| (id, majority(m))).collect();
        let gt_cls: HashMap<u32, u32> = self.gt_class.iter().map(|(&id, m)| (id, majority(m))).collect();
        let mut matches: Vec<(u32, u32, f64)> = Vec::new();
        for (&(p, g), &n) in &self.inter {
            if pred_cls[&p] != gt_cls[&g] {
                continue;
            }
            let union = self.pred_area[&p] + self.gt_area[&g] - n;
            let v = n as f64 / union as f64;
            if v > 0.5 {
                matches.push((p, g, v));
            }
        }
        // summing in ground-truth order keeps PQ bit-identical under any
        // renaming of the predicted IDs
        matches.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut classes: Vec<u32> = pred_cls.values().chain(gt_cls.values()).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        let mut per_class = Vec::new();
        let (mut tp, mut fp, mut fn_, mut sum) = (0, 0, 0, 0.0);
        for c in classes {
            let ms: Vec<&(u32, u32, f64)> = matches.iter().filter(|m| gt_cls[&m.1] == c).collect();
            let ctp = ms.len();
            let csum: f64 = ms.iter().map(|m| m.2).sum();
            let cfp = pred_cls.values().filter(|&&x| x == c).count() - ctp;
            let cfn = gt_cls.values().filter(|&&x| x == c).count() - ctp;
            let (pq, sq, rq) = quality(csum, ctp, cfp, cfn);
            per_class.push(ClassPq {
                class: c,
                pq,
                sq,
                rq,
                tp: ctp,
                fp: cfp,
                fn_: cfn,
            });
            tp += ctp;
            fp += cfp;
            fn_ += cfn;
            sum += csum;
        }
        let (pq, sq, rq) = quality(sum, tp, fp, fn_);
        PqReport {
            pq,
            sq,
            rq,
            tp,
            fp,
            fn_,
            per_class,
            matches,
        }
    }
}

pub fn pq_frame(pred: &Frame, gt: &Frame) -> Result<PqReport> {
    let mut t = Tally::default();
    t.add(pred, gt)?;
    Ok(t.report())
}

/// PQ over whole sequences: each ID's pixels in every frame form one segment.
pub fn pq_scene(pred: &[Frame], gt: &[Frame]) -> Result<PqReport> {
    if pred.len() != gt.len() {
        return Err(LiftError::LengthMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let mut t = Tally::default();
    for (p, g) in pred.iter().zip(gt) {
        t.add(p, g)?;
    }
    Ok(t.report())
}

/// Mean of per-frame PQ values.
pub fn mean_pq_frame(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(LiftError::LengthMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        s += pq_frame(p, g)?.pq;
    }
    Ok(s / pred.len() as f64)
}

/// Mean IoU over the classes that appear in the ground truth.
pub fn miou(pred: &[&LabelMap], gt: &[&LabelMap], classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(LiftError::LengthMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (p, g) in pred.iter().zip(gt) {
        if !p.same_shape(g) {
            return Err(LiftError::DimensionMismatch("semantic maps differ in size".into()));
        }
        for (&a, &b) in p.data.iter().zip(&g.data) {
            let (a, b) = (a as usize, b as usize);
            if a >= classes || b >= classes {
                return Err(LiftError::DimensionMismatch(format!(
                    "semantic label outside {classes} classes"
                )));
            }
            present[b] = true;
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    })
}

/// −10·log10(MSE) over all channels; +∞ for identical images.
pub fn psnr(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LiftError::LengthMismatch {
            expected: b.len(),
            actual: a.len(),
        });
    }
    if a.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * a.len()) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, data: &[u32]) -> LabelMap {
        LabelMap::from_vec(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = [true, true, false, true];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        let a = [true, true, true, true, false, false];
        let b = [false, false, true, true, true, true];
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou(&a, &b[..3]).is_err());
    }

    #[test]
    fn permuted_prediction_is_perfect() {
        let gt = map(4, 1, &[1, 1, 2, 0]);
        let pred = map(4, 1, &[7, 7, 3, 0]);
        let r = pq_frame(&Frame::instances(&pred), &Frame::instances(&gt)).unwrap();
        assert_eq!(r.pq, 1.0);
    }

    #[test]
    fn spurious_segment() {
        let gt = map(5, 1, &[1, 1, 2, 2, 0]);
        let pred = map(5, 1, &[1, 1, 2, 2, 3]);
        let r = pq_frame(&Frame::instances(&pred), &Frame::instances(&gt)).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 0));
        assert!((r.pq - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gt = map(3, 1, &[1, 2, 3]);
        let pred = map(3, 1, &[0, 0, 0]);
        let r = pq_frame(&Frame::instances(&pred), &Frame::instances(&gt)).unwrap();
        assert_eq!(r.pq, 0.0);
        assert_eq!(r.fn_, 3);
    }

    #[test]
    fn split_object_scores_zero() {
        let gt = [map(2, 1, &[1, 1]), map(2, 1, &[1, 1])];
        let pred = [map(2, 1, &[1, 1]), map(2, 1, &[2, 2])];
        let p: Vec<Frame> = pred.iter().map(Frame::instances).collect();
        let g: Vec<Frame> = gt.iter().map(Frame::instances).collect();
        let r = pq_scene(&p, &g).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.pq), (0, 2, 1, 0.0));
    }

    #[test]
    fn scene_on_one_frame_equals_frame() {
        let gt = map(6, 1, &[1, 1, 2, 2, 2, 0]);
        let pred = map(6, 1, &[4, 1, 1, 2, 2, 2]);
        let a = pq_frame(&Frame::instances(&pred), &Frame::instances(&gt)).unwrap();
        let b = pq_scene(&[Frame::instances(&pred)], &[Frame::instances(&gt)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matching_is_class_restricted() {
        let gt = map(2, 1, &[1, 1]);
        let gs = map(2, 1, &[1, 1]);
        let pred = map(2, 1, &[5, 5]);
        let ps = map(2, 1, &[2, 2]);
        let r = pq_frame(&Frame::new(&pred, Some(&ps)), &Frame::new(&gt, Some(&gs))).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        assert_eq!(r.per_class.len(), 2);
    }

    #[test]
    fn report_json_fields() {
        let gt = map(2, 1, &[1, 1]);
        let r = pq_frame(&Frame::instances(&gt), &Frame::instances(&gt)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["fn", "fp", "per_class", "pq", "rq", "sq", "tp"]);
    }

    #[test]
    fn miou_examples() {
        let a = map(4, 1, &[0, 0, 1, 1]);
        assert_eq!(miou(&[&a], &[&a], 3).unwrap(), 1.0);
        let p = map(2, 1, &[0, 0]);
        let g = map(2, 1, &[0, 1]);
        // class 0: 1/2, class 1: 0
        assert!((miou(&[&p], &[&g], 2).unwrap() - 0.25).abs() < 1e-15);
        // class 0 perfect, class 1 predicted as 2 (absent from GT, so excluded)
        let p = map(4, 1, &[0, 0, 2, 2]);
        let g = map(4, 1, &[0, 0, 1, 1]);
        assert_eq!(miou(&[&p], &[&g], 3).unwrap(), 0.5);
        let p = map(2, 1, &[0, 0]);
        let g = map(2, 1, &[0, 0]);
        let q = map(2, 1, &[1, 1]);
        let g2 = map(2, 1, &[1, 1]);
        // IoU 1 for class 0 (frame 1) and class 1 (frame 2)
        assert_eq!(miou(&[&p, &q], &[&g, &g2], 4).unwrap(), 1.0);
    }

    #[test]
    fn psnr_examples() {
        let a = [[0.2, 0.4, 0.6]];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = [[0.3, 0.5, 0.7]];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&[[0.0; 3]], &[[1.0; 3]]).unwrap().abs() < 1e-12);
    }
}
