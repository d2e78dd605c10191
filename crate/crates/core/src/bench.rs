//! Wall-clock cost of the slow-fast loss against the linear-assignment
//! baseline as the number of labels per batch grows.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::fields::softmax_into;
use crate::losses::{linear_assignment_loss, slowfast_loss, EmbedBatch};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub batch: usize,
    /// Fastest of the repeats, in seconds per evaluation (loss and gradient).
    /// The minimum is the least disturbed by other load on the machine.
    pub slowfast_s: f64,
    pub linassign_s: f64,
}

fn fastest(v: Vec<f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

/// Times both losses on a batch whose labels are drawn uniformly from K
/// values. The slow-fast loss contrasts one half of the batch (fast) with the
/// other (slow) in `dim` dimensions; the baseline scores K-way softmax outputs.
pub fn bench_losses(ks: &[usize], batch: usize, repeats: usize, dim: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if batch < 2 || repeats == 0 || dim == 0 {
        return Err(LiftError::Config("bench needs batch >= 2, repeats >= 1 and dim >= 1".into()));
    }
    struct Case {
        labels: Vec<u32>,
        emb: Vec<f64>,
        probs: Vec<f64>,
    }
    let mut cases = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(LiftError::Config("K must be positive".into()));
        }
        let mut rng = seeds::rng(seed, k as u64);
        let labels: Vec<u32> = (0..batch).map(|_| rng.random_range(1..=k as u32)).collect();
        let emb: Vec<f64> = (0..batch * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut probs = Vec::with_capacity(batch * k);
        let mut p = Vec::new();
        for _ in 0..batch {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            softmax_into(&logits, &mut p);
            probs.extend_from_slice(&p);
        }
        cases.push(Case { labels, emb, probs });
    }
    let images = vec![0usize; batch];
    let h = batch / 2;
    let mut sf = vec![Vec::with_capacity(repeats); ks.len()];
    let mut la = vec![Vec::with_capacity(repeats); ks.len()];
    // K values take turns within each repeat so drift in machine speed
    // spreads evenly over them
    for _ in 0..repeats {
        for (i, (c, &k)) in cases.iter().zip(ks).enumerate() {
            let fast = EmbedBatch::new(&c.emb[..h * dim], dim, &c.labels[..h], &images[..h])?;
            let slow = EmbedBatch::new(&c.emb[h * dim..], dim, &c.labels[h..], &images[h..])?;
            let t = Instant::now();
            std::hint::black_box(slowfast_loss(&fast, &slow, 1.0)?);
            sf[i].push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(linear_assignment_loss(&c.probs, k, &c.labels)?);
            la[i].push(t.elapsed().as_secs_f64());
        }
    }
    let rows = ks
        .iter()
        .zip(sf.into_iter().zip(la))
        .map(|(&k, (sf, la))| BenchRow {
            k,
            batch,
            slowfast_s: fastest(sf),
            linassign_s: fastest(la),
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_k_list() {
        let rows = bench_losses(&[2, 5], 16, 2, 3, 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 5]);
        assert!(rows.iter().all(|r| r.slowfast_s >= 0.0 && r.linassign_s >= 0.0));
        assert!(bench_losses(&[0], 16, 1, 3, 0).is_err());
    }
}
