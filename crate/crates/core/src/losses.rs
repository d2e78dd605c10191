//! Training objectives and their analytic gradients.
//!
//! Embedding losses take flat row-major `[n x dim]` arrays and return the
//! gradient with respect to those rows. The contrastive family feeds the RBF
//! similarity through another exponential before normalizing, so every logit
//! lies in (0, 1] and no log-sum-exp shift is needed.

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::geometry::{dist2, Vec3};
use crate::tracking::hungarian;

/// Probabilities below this are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// d value / d input rows (same shape as the anchor input)
    pub grad: Vec<f64>,
    /// d value / d target rows, only filled when targets carry gradient
    pub grad_targets: Vec<f64>,
    /// anchors left out because their label has no counterpart in the targets
    pub skipped: usize,
    pub anchors: usize,
}

impl LossGrad {
    pub fn skipped_fraction(&self) -> f64 {
        if self.anchors == 0 {
            0.0
        } else {
            self.skipped as f64 / self.anchors as f64
        }
    }
}

/// Embeddings of a set of pixels together with their 2D labels and the image
/// each pixel was drawn from.
#[derive(Debug, Clone, Copy)]
pub struct EmbedBatch<'a> {
    pub emb: &'a [f64],
    pub dim: usize,
    pub labels: &'a [u32],
    pub images: &'a [usize],
}

impl<'a> EmbedBatch<'a> {
    pub fn new(emb: &'a [f64], dim: usize, labels: &'a [u32], images: &'a [usize]) -> Result<Self> {
        if dim == 0 || emb.len() != labels.len() * dim {
            return Err(LiftError::LengthMismatch {
                expected: labels.len() * dim,
                actual: emb.len(),
            });
        }
        if images.len() != labels.len() {
            return Err(LiftError::LengthMismatch {
                expected: labels.len(),
                actual: images.len(),
            });
        }
        Ok(EmbedBatch {
            emb,
            dim,
            labels,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.emb[i * self.dim..(i + 1) * self.dim]
    }

    fn single_image(&self) -> Result<Option<usize>> {
        let Some(&first) = self.images.first() else {
            return Ok(None);
        };
        match self.images.iter().find(|&&i| i != first) {
            Some(&other) => Err(LiftError::MixedImageBatch { first, other }),
            None => Ok(Some(first)),
        }
    }
}

fn same_image(a: &EmbedBatch, b: &EmbedBatch) -> Result<()> {
    if let (Some(x), Some(y)) = (a.single_image()?, b.single_image()?) {
        if x != y {
            return Err(LiftError::MixedImageBatch { first: x, other: y });
        }
    }
    Ok(())
}

/// Mean squared RGB residual norm and its gradient w.r.t. `rendered`.
pub fn photometric_loss(rendered: &[Vec3], target: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if rendered.len() != target.len() {
        return Err(LiftError::LengthMismatch {
            expected: target.len(),
            actual: rendered.len(),
        });
    }
    if rendered.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = rendered.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.iter().zip(target) {
        let d = [r[0] - t[0], r[1] - t[1], r[2] - t[2]];
        value += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        grad.push([2.0 * d[0] / n, 2.0 * d[1] / n, 2.0 * d[2] / n]);
    }
    Ok((value / n, grad))
}

/// Gaussian RBF similarity exp(-γ‖a - b‖²).
#[inline]
pub fn rbf_sim(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * dist2(a, b)).exp()
}

/// Shared core of the contrastive and slow-fast losses. Every anchor row is
/// compared against every target row; `grad_targets` is filled when the
/// targets are the same differentiable embeddings.
fn contrast(
    anchors: &EmbedBatch,
    targets: &EmbedBatch,
    gamma: f64,
    grad_targets: bool,
) -> LossGrad {
    let dim = anchors.dim;
    let (na, nt) = (anchors.len(), targets.len());
    let mut out = LossGrad {
        grad: vec![0.0; na * dim],
        grad_targets: if grad_targets { vec![0.0; nt * dim] } else { Vec::new() },
        anchors: na,
        ..LossGrad::default()
    };
    let mut sims = vec![0.0; nt];
    let mut logits = vec![0.0; nt];
    let mut terms = Vec::with_capacity(na);
    // pass 1: values; anchors without positives get weight zero rather than a
    // branch, so cost does not depend on how labels are distributed
    for u in 0..na {
        let a = anchors.row(u);
        let yu = anchors.labels[u];
        let (mut pos, mut all) = (0.0, 0.0);
        for v in 0..nt {
            let s = rbf_sim(a, targets.row(v), gamma);
            let e = s.exp();
            sims[v] = s;
            logits[v] = e;
            all += e;
            pos += e * f64::from(u8::from(targets.labels[v] == yu));
        }
        let has_pos = pos > 0.0;
        terms.push((has_pos, pos.max(f64::MIN_POSITIVE), all));
        if has_pos {
            out.value += all.ln() - pos.ln();
        } else {
            out.skipped += 1;
        }
    }
    let kept = na - out.skipped;
    if kept == 0 {
        out.value = 0.0;
        return out;
    }
    let inv_n = 1.0 / kept as f64;
    out.value *= inv_n;
    // pass 2: gradients, dℓ_u/ds_uv = q_uv - p_uv
    for u in 0..na {
        let (has_pos, pos, all) = terms[u];
        let scale = if has_pos { inv_n } else { 0.0 };
        let a = anchors.row(u);
        let yu = anchors.labels[u];
        for v in 0..nt {
            let t = targets.row(v);
            let s = rbf_sim(a, t, gamma);
            let e = s.exp();
            let mask = f64::from(u8::from(targets.labels[v] == yu));
            let c = scale * (e / all - mask * e / pos) * s * (-2.0 * gamma);
            for k in 0..dim {
                let d = c * (a[k] - t[k]);
                out.grad[u * dim + k] += d;
                if grad_targets {
                    out.grad_targets[v * dim + k] -= d;
                }
            }
        }
    }
    out
}

/// Vanilla contrastive loss over one image's pixels; pairs include u' = u.
pub fn contrastive_loss(batch: &EmbedBatch, gamma: f64) -> Result<LossGrad> {
    batch.single_image()?;
    if batch.is_empty() {
        return Ok(LossGrad::default());
    }
    let mut out = contrast(batch, batch, gamma, true);
    // anchors and targets are the same rows
    let gt = std::mem::take(&mut out.grad_targets);
    for (g, t) in out.grad.iter_mut().zip(gt) {
        *g += t;
    }
    Ok(out)
}

/// Slow-fast contrastive loss: fast anchors against slow targets. Slow
/// embeddings are constants; only `grad` (for the fast rows) is returned.
pub fn slowfast_loss(fast: &EmbedBatch, slow: &EmbedBatch, gamma: f64) -> Result<LossGrad> {
    same_image(fast, slow)?;
    if slow.is_empty() {
        return Err(LiftError::EmptyTargetSet);
    }
    check_dims(fast, slow)?;
    Ok(contrast(fast, slow, gamma, false))
}

fn check_dims(a: &EmbedBatch, b: &EmbedBatch) -> Result<()> {
    if a.dim != b.dim {
        return Err(LiftError::DimensionMismatch(format!(
            "embedding dims {} and {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

/// Groups in order of first appearance; returns (group of each row, group labels).
fn groups(labels: &[u32]) -> (Vec<usize>, Vec<u32>) {
    let mut ids: Vec<u32> = Vec::new();
    let mut lookup = std::collections::HashMap::new();
    let of = labels
        .iter()
        .map(|&y| {
            *lookup.entry(y).or_insert_with(|| {
                ids.push(y);
                ids.len() - 1
            })
        })
        .collect();
    (of, ids)
}

fn centroids(batch: &EmbedBatch, of: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let dim = batch.dim;
    let mut sum = vec![0.0; k * dim];
    let mut count = vec![0usize; k];
    for (i, &g) in of.iter().enumerate() {
        count[g] += 1;
        for (s, x) in sum[g * dim..(g + 1) * dim].iter_mut().zip(batch.row(i)) {
            *s += x;
        }
    }
    for g in 0..k {
        for s in &mut sum[g * dim..(g + 1) * dim] {
            *s /= count[g] as f64;
        }
    }
    (sum, count)
}

/// Mean squared distance of each fast anchor to the centroid of the targets
/// sharing its label. With `grad_to_targets` the centroids are differentiable
/// (used when the targets are fast embeddings too).
pub fn concentration_loss(
    fast: &EmbedBatch,
    targets: &EmbedBatch,
    grad_to_targets: bool,
) -> Result<LossGrad> {
    same_image(fast, targets)?;
    if targets.is_empty() {
        return Err(LiftError::EmptyTargetSet);
    }
    check_dims(fast, targets)?;
    let dim = fast.dim;
    let (of, ids) = groups(targets.labels);
    let (cent, count) = centroids(targets, &of, ids.len());
    let index: std::collections::HashMap<u32, usize> =
        ids.iter().enumerate().map(|(g, &y)| (y, g)).collect();
    let mut out = LossGrad {
        grad: vec![0.0; fast.len() * dim],
        grad_targets: if grad_to_targets {
            vec![0.0; targets.len() * dim]
        } else {
            Vec::new()
        },
        anchors: fast.len(),
        ..LossGrad::default()
    };
    let matched: Vec<Option<usize>> = fast.labels.iter().map(|y| index.get(y).copied()).collect();
    out.skipped = matched.iter().filter(|m| m.is_none()).count();
    let kept = fast.len() - out.skipped;
    if kept == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / kept as f64;
    // d loss / d centroid, accumulated per group
    let mut g_cent = vec![0.0; ids.len() * dim];
    for (u, m) in matched.iter().enumerate() {
        let Some(g) = *m else { continue };
        let c = &cent[g * dim..(g + 1) * dim];
        let a = fast.row(u);
        for k in 0..dim {
            let d = a[k] - c[k];
            out.value += d * d * inv_n;
            out.grad[u * dim + k] = 2.0 * d * inv_n;
            g_cent[g * dim + k] -= 2.0 * d * inv_n;
        }
    }
    if grad_to_targets {
        for (v, &g) in of.iter().enumerate() {
            for k in 0..dim {
                out.grad_targets[v * dim + k] = g_cent[g * dim + k] / count[g] as f64;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PushForm {
    /// +(1/K²) ΣΣ ‖c_k - c_k'‖², taken at face value
    #[default]
    Literal,
    /// (1/K²) ΣΣ exp(-½‖c_k - c_k'‖²)
    Repulsive,
}

/// Associative-embedding loss: pull every embedding to its group centroid and
/// a push term over ordered centroid pairs.
pub fn ae_loss(batch: &EmbedBatch, form: PushForm) -> Result<LossGrad> {
    batch.single_image()?;
    let n = batch.len();
    let dim = batch.dim;
    let mut out = LossGrad {
        grad: vec![0.0; n * dim],
        anchors: n,
        ..LossGrad::default()
    };
    if n == 0 {
        return Ok(out);
    }
    let (of, ids) = groups(batch.labels);
    let k = ids.len();
    let (cent, count) = centroids(batch, &of, k);
    let inv_n = 1.0 / n as f64;
    for (u, &g) in of.iter().enumerate() {
        let a = batch.row(u);
        for j in 0..dim {
            let d = a[j] - cent[g * dim + j];
            out.value += d * d * inv_n;
            // the centroid's own dependence cancels because deviations sum to zero
            out.grad[u * dim + j] = 2.0 * d * inv_n;
        }
    }
    let inv_k2 = 1.0 / (k * k) as f64;
    let mut g_cent = vec![0.0; k * dim];
    for a in 0..k {
        for b in 0..k {
            let ca = &cent[a * dim..(a + 1) * dim];
            let cb = &cent[b * dim..(b + 1) * dim];
            let d2 = dist2(ca, cb);
            // derivative of the (a, b) term w.r.t. c_a; c_b gets the negation
            let coef = match form {
                PushForm::Literal => {
                    out.value += d2 * inv_k2;
                    2.0 * inv_k2
                }
                PushForm::Repulsive => {
                    let e = (-0.5 * d2).exp();
                    out.value += e * inv_k2;
                    -e * inv_k2
                }
            };
            for j in 0..dim {
                let d = coef * (ca[j] - cb[j]);
                g_cent[a * dim + j] += d;
                g_cent[b * dim + j] -= d;
            }
        }
    }
    for (u, &g) in of.iter().enumerate() {
        for j in 0..dim {
            out.grad[u * dim + j] += g_cent[g * dim + j] / count[g] as f64;
        }
    }
    Ok(out)
}

/// Margin loss over ordered pixel pairs, normalized by |Ω|².
pub fn margin_loss(batch: &EmbedBatch, eps: f64) -> Result<LossGrad> {
    batch.single_image()?;
    let n = batch.len();
    let dim = batch.dim;
    let mut out = LossGrad {
        grad: vec![0.0; n * dim],
        anchors: n,
        ..LossGrad::default()
    };
    if n == 0 {
        return Ok(out);
    }
    let inv = 1.0 / (n * n) as f64;
    for u in 0..n {
        for v in 0..n {
            let (a, b) = (batch.row(u), batch.row(v));
            let d2 = dist2(a, b);
            let coef = if batch.labels[u] == batch.labels[v] {
                out.value += d2 * inv;
                2.0 * inv
            } else if d2 < eps {
                out.value += (eps - d2) * inv;
                -2.0 * inv
            } else {
                0.0
            };
            for j in 0..dim {
                let d = coef * (a[j] - b[j]);
                out.grad[u * dim + j] += d;
                out.grad[v * dim + j] -= d;
            }
        }
    }
    Ok(out)
}

/// Mean of -log p[label] with p clamped at [`PROB_FLOOR`]. Returns the value
/// and d value / d probs.
pub fn semantic_ce_loss(probs: &[f64], classes: usize, labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() * classes {
        return Err(LiftError::LengthMismatch {
            expected: labels.len() * classes,
            actual: probs.len(),
        });
    }
    let mut grad = vec![0.0; probs.len()];
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / labels.len() as f64;
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= classes {
            return Err(LiftError::DimensionMismatch(format!(
                "semantic label {y} outside {classes} classes"
            )));
        }
        let p = probs[i * classes + y];
        if p > PROB_FLOOR {
            value -= p.ln() * inv_n;
            grad[i * classes + y] = -inv_n / p;
        } else {
            value -= PROB_FLOOR.ln() * inv_n;
        }
    }
    Ok((value, grad))
}

/// Outcome of the linear-assignment loss: the matched channel of every
/// segment (in order of first appearance) and the optimal assignment cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentLoss {
    pub loss: LossGrad,
    pub segments: Vec<u32>,
    pub channels: Vec<usize>,
    pub cost: f64,
}

/// Aligns each segment to one of K probability channels by min-cost
/// assignment on negative mean probability, then applies cross-entropy
/// against the matched channel. `probs` is `[n x k]`.
pub fn linear_assignment_loss(probs: &[f64], k: usize, segments: &[u32]) -> Result<AssignmentLoss> {
    if probs.len() != segments.len() * k {
        return Err(LiftError::LengthMismatch {
            expected: segments.len() * k,
            actual: probs.len(),
        });
    }
    let (of, ids) = groups(segments);
    if ids.len() > k {
        return Err(LiftError::TooManySegments {
            segments: ids.len(),
            k,
        });
    }
    let mut cost = vec![vec![0.0; k]; ids.len()];
    let mut count = vec![0usize; ids.len()];
    for (i, &g) in of.iter().enumerate() {
        count[g] += 1;
        for (c, p) in cost[g].iter_mut().zip(&probs[i * k..(i + 1) * k]) {
            *c -= p;
        }
    }
    for (row, &c) in cost.iter_mut().zip(&count) {
        for v in row.iter_mut() {
            *v /= c as f64;
        }
    }
    let assignment = hungarian(&cost)?;
    let channels: Vec<usize> = assignment
        .row_to_col
        .iter()
        .map(|c| c.expect("segments never outnumber channels here"))
        .collect();
    let labels: Vec<u32> = of.iter().map(|&g| channels[g] as u32).collect();
    let (value, grad) = semantic_ce_loss(probs, k, &labels)?;
    Ok(AssignmentLoss {
        loss: LossGrad {
            value,
            grad,
            anchors: segments.len(),
            ..LossGrad::default()
        },
        segments: ids,
        channels,
        cost: assignment.cost,
    })
}

/// Var/Mean of |g| over the entries of one gradient vector (population
/// variance). None when the mean is zero.
pub fn grad_relative_variance(grad: &[f64]) -> Option<f64> {
    if grad.is_empty() {
        return None;
    }
    let n = grad.len() as f64;
    let mean = grad.iter().map(|g| g.abs()).sum::<f64>() / n;
    if !(mean > 0.0) {
        return None;
    }
    let var = grad.iter().map(|g| (g.abs() - mean).powi(2)).sum::<f64>() / n;
    Some(var / mean)
}
