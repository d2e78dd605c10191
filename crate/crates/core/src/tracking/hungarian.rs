//! Minimum-cost assignment via shortest augmenting paths with potentials.

use crate::error::{LiftError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; None only when there are more rows than columns.
    pub row_to_col: Vec<Option<usize>>,
    /// Sum of the chosen entries, accumulated in row order.
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// Solves min Σ cost[r][σ(r)] over injective matchings of the smaller side.
/// Rectangular matrices are fine; non-finite entries are rejected.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment {
            row_to_col: Vec::new(),
            cost: 0.0,
        });
    }
    let m = cost[0].len();
    for (r, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(LiftError::DimensionMismatch(format!(
                "cost row {r} has {} columns, expected {m}",
                row.len()
            )));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(LiftError::NonFiniteCost { row: r, col: c });
        }
    }
    if m == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; n],
            cost: 0.0,
        });
    }
    let row_to_col = if n <= m {
        solve(n, m, |i, j| cost[i][j])
    } else {
        let col_to_row = solve(m, n, |i, j| cost[j][i]);
        let mut out = vec![None; n];
        for (c, r) in col_to_row.into_iter().enumerate() {
            out[r.expect("every column is matched")] = Some(c);
        }
        out
    };
    let total = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[r][c]))
        .sum();
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}

/// n <= m. Returns the column of every row.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}
