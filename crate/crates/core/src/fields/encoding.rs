use std::f64::consts::PI;

use crate::geometry::Vec3;

/// Output length of [`freq_encode`] for order `order`.
pub fn encoded_len(order: usize) -> usize {
    3 + 6 * order
}

/// `d` followed by, for each `k < order`, `sin(2^k pi d)` then `cos(2^k pi d)`.
pub fn freq_encode(d: Vec3, order: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&d);
    for k in 0..order {
        let f = (1u64 << k) as f64 * PI;
        out.extend(d.iter().map(|v| (f * v).sin()));
        out.extend(d.iter().map(|v| (f * v).cos()));
    }
}
