mod common;

use common::{brute_pq_scene, permute, pq_scene_plain, random_sequence, rng, sequence_pair};
use lift_core::image::LabelMap;
use lift_core::metrics::{mean_pq_frame, Frame};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn pq_scene_matches_brute_force(seed in any::<u64>()) {
        let (pred, gt) = sequence_pair(seed);
        let rep = pq_scene_plain(&pred, &gt);
        let (pq, tp, fp, fn_) = brute_pq_scene(&pred, &gt);
        prop_assert_eq!((rep.tp, rep.fp, rep.fn_), (tp, fp, fn_));
        prop_assert!((rep.pq - pq).abs() <= 1e-12, "{} vs {}", rep.pq, pq);
    }

    #[test]
    fn pq_is_invariant_to_id_permutations(seed in any::<u64>()) {
        let (pred, gt) = sequence_pair(seed);
        let a = pq_scene_plain(&pred, &gt);
        let b = pq_scene_plain(&permute(&pred, seed ^ 7), &permute(&gt, seed ^ 9));
        prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
        prop_assert!((a.pq - b.pq).abs() <= 1e-12);
        let f = |p: &[LabelMap], g: &[LabelMap]| {
            let p: Vec<Frame> = p.iter().map(Frame::instances).collect();
            let g: Vec<Frame> = g.iter().map(Frame::instances).collect();
            mean_pq_frame(&p, &g).unwrap()
        };
        prop_assert!((f(&pred, &gt) - f(&permute(&pred, seed ^ 3), &gt)).abs() <= 1e-12);
    }

    #[test]
    fn pq_lies_in_unit_interval(seed in any::<u64>()) {
        let (pred, gt) = sequence_pair(seed);
        let rep = pq_scene_plain(&pred, &gt);
        prop_assert!((0.0..=1.0).contains(&rep.pq));
        prop_assert!((0.0..=1.0).contains(&rep.sq) && (0.0..=1.0).contains(&rep.rq));
    }
}

/// Turning a correct pixel wrong never helps, as long as the flip does not
/// delete a predicted segment outright (removing the last pixel of an
/// unmatched segment drops a false positive and can raise PQ).
#[test]
fn flipping_pixels_never_raises_pq_scene() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let frames = r.random_range(1..=3);
        let gt = random_sequence(&mut r, frames, 8, 4);
        let mut pred = gt.clone();
        let mut last = pq_scene_plain(&pred, &gt).pq;
        assert_eq!(last, 1.0);
        let mut flips = 0;
        while flips < 40 {
            let f = r.random_range(0..frames);
            let p = r.random_range(0..64);
            let right = gt[f].data[p];
            if pred[f].data[p] != right {
                continue;
            }
            let area = pred.iter().flat_map(|m| &m.data).filter(|&&v| v == right).count();
            if right != 0 && area == 1 {
                continue;
            }
            let wrong = loop {
                let v = r.random_range(0..=5);
                if v != right {
                    break v;
                }
            };
            pred[f].data[p] = wrong;
            flips += 1;
            let now = pq_scene_plain(&pred, &gt).pq;
            assert!(now <= last + 1e-12, "seed {seed}: {last} -> {now}");
            last = now;
        }
    }
}
