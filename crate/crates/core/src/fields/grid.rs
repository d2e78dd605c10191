use crate::geometry::{Aabb, Vec3};

/// Dense vertex grid over an axis-aligned box, `channels` values per vertex.
///
/// Vertex `(i, j, k)` sits at `min + (i, j, k) * spacing`; values are stored
/// x-fastest, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub bounds: Aabb,
    pub res: [usize; 3],
    pub channels: usize,
}

/// The eight vertices surrounding a query point and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    /// Offset of each corner's first channel, relative to the grid's slice.
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl Grid {
    pub fn new(bounds: Aabb, res: [usize; 3], channels: usize) -> Self {
        assert!(res.iter().all(|&r| r >= 2), "grid needs >= 2 vertices per axis");
        Grid {
            bounds,
            res,
            channels,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    pub fn len(&self) -> usize {
        self.num_vertices() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> Vec3 {
        let e = self.bounds.extent();
        [
            e[0] / (self.res[0] - 1) as f64,
            e[1] / (self.res[1] - 1) as f64,
            e[2] / (self.res[2] - 1) as f64,
        ]
    }

    #[inline]
    pub fn vertex_offset(&self, i: usize, j: usize, k: usize) -> usize {
        ((k * self.res[1] + j) * self.res[0] + i) * self.channels
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing();
        [
            self.bounds.min[0] + i as f64 * h[0],
            self.bounds.min[1] + j as f64 * h[1],
            self.bounds.min[2] + k as f64 * h[2],
        ]
    }

    /// `None` outside the box: such points carry zero value.
    pub fn corners(&self, x: Vec3) -> Option<Corners> {
        if !self.bounds.contains(x) {
            return None;
        }
        let h = self.spacing();
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (x[a] - self.bounds.min[a]) / h[a];
            let c = (u.floor().max(0.0) as usize).min(self.res[a] - 2);
            cell[a] = c;
            frac[a] = (u - c as f64).clamp(0.0, 1.0);
        }
        let mut index = [0usize; 8];
        let mut weight = [0.0; 8];
        for n in 0..8 {
            let (di, dj, dk) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            index[n] = self.vertex_offset(cell[0] + di, cell[1] + dj, cell[2] + dk);
            let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
            weight[n] = wx * wy * wz;
        }
        Some(Corners { index, weight })
    }

    #[inline]
    pub fn interpolate(&self, values: &[f64], c: &Corners, out: &mut [f64]) {
        out.fill(0.0);
        for n in 0..8 {
            let w = c.weight[n];
            let base = c.index[n];
            for (o, v) in out.iter_mut().zip(&values[base..base + self.channels]) {
                *o += w * v;
            }
        }
    }

    /// Interpolated value(s) at `x`; zeros outside the box.
    pub fn trilerp(&self, values: &[f64], x: Vec3, out: &mut [f64]) {
        match self.corners(x) {
            Some(c) => self.interpolate(values, &c, out),
            None => out.fill(0.0),
        }
    }

    /// Accumulates `d out / d values` contracted with `grad_out` into `grad`.
    #[inline]
    pub fn scatter(&self, c: &Corners, grad_out: &[f64], grad: &mut [f64]) {
        for n in 0..8 {
            let w = c.weight[n];
            let base = c.index[n];
            for (g, go) in grad[base..base + self.channels].iter_mut().zip(grad_out) {
                *g += w * go;
            }
        }
    }

    /// Trilinearly resamples `values` onto a grid of resolution `res` over the same box.
    pub fn resample(&self, values: &[f64], res: [usize; 3]) -> (Grid, Vec<f64>) {
        let target = Grid::new(self.bounds, res, self.channels);
        let mut out = vec![0.0; target.len()];
        for k in 0..res[2] {
            for j in 0..res[1] {
                for i in 0..res[0] {
                    let p = target.vertex_position(i, j, k);
                    let p = clamp_into(&self.bounds, p);
                    let o = target.vertex_offset(i, j, k);
                    self.trilerp(values, p, &mut out[o..o + self.channels]);
                }
            }
        }
        (target, out)
    }
}

fn clamp_into(b: &Aabb, p: Vec3) -> Vec3 {
    [
        p[0].clamp(b.min[0], b.max[0]),
        p[1].clamp(b.min[1], b.max[1]),
        p[2].clamp(b.min[2], b.max[2]),
    ]
}
