//! Exact nearest-neighbour queries over a point set.
//!
//! Small sets use a linear scan; larger sets are bucketed into a uniform grid
//! that is searched ring by ring until the current best distance is provably
//! minimal. Both paths evaluate the same squared-distance expression, so their
//! answers are bit-identical.

use super::Point;

/// Sets with fewer points than this are scanned linearly.
pub const GRID_THRESHOLD: usize = 512;

const MAX_CELLS_PER_AXIS: usize = 128;

#[inline(always)]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn widen(p: &Point) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Nearest-neighbour oracle over a fixed target set.
pub enum NearestNeighbors {
    Linear(Vec<[f64; 3]>),
    Grid(Grid),
}

impl NearestNeighbors {
    pub fn new(points: &[Point]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(widen).collect();
        if pts.len() < GRID_THRESHOLD {
            NearestNeighbors::Linear(pts)
        } else {
            NearestNeighbors::Grid(Grid::build(pts))
        }
    }

    /// Forces the linear strategy regardless of size.
    pub fn linear(points: &[Point]) -> Self {
        NearestNeighbors::Linear(points.iter().map(widen).collect())
    }

    /// Forces the grid strategy regardless of size.
    pub fn grid(points: &[Point]) -> Self {
        NearestNeighbors::Grid(Grid::build(points.iter().map(widen).collect()))
    }

    /// Squared distance from `x` to its nearest neighbour in the set.
    pub fn nearest_sq(&self, x: [f64; 3]) -> f64 {
        match self {
            NearestNeighbors::Linear(pts) => pts
                .iter()
                .fold(f64::INFINITY, |best, p| best.min(dist2(x, *p))),
            NearestNeighbors::Grid(g) => g.nearest_sq(x),
        }
    }
}

pub struct Grid {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    // CSR layout: points of cell c are cell_points[cell_start[c]..cell_start[c + 1]].
    cell_start: Vec<u32>,
    cell_points: Vec<u32>,
}

impl Grid {
    fn build(points: Vec<[f64; 3]>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        let n = points.len().max(1) as f64;
        let mut cell = if extent > 0.0 {
            2.0 * extent / n.sqrt()
        } else {
            1.0
        };
        let axis_cells = |cell: f64| -> [usize; 3] {
            let mut d = [1usize; 3];
            for a in 0..3 {
                d[a] = ((hi[a] - lo[a]) / cell).floor() as usize + 1;
            }
            d
        };
        let mut dims = axis_cells(cell);
        while dims.iter().any(|&d| d > MAX_CELLS_PER_AXIS) {
            cell *= 1.5;
            dims = axis_cells(cell);
        }

        let total = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; total + 1];
        let cell_of: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = cell_coords(p, lo, cell, dims);
                flat(c, dims)
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut cell_points = vec![0u32; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            cell_points[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Grid {
            points,
            origin: lo,
            cell,
            dims,
            cell_start: counts,
            cell_points,
        }
    }

    fn nearest_sq(&self, x: [f64; 3]) -> f64 {
        let c = cell_coords(&x, self.origin, self.cell, self.dims);
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            self.scan_ring(c, r, x, &mut best);
            match self.unsearched_bound(c, r, x) {
                None => break,
                Some(lb) if best <= lb * lb => break,
                Some(_) => {}
            }
        }
        best
    }

    fn scan_ring(&self, c: [usize; 3], r: usize, x: [f64; 3], best: &mut f64) {
        let r = r as isize;
        let lo = |a: usize| (c[a] as isize - r).max(0) as usize;
        let hi = |a: usize| ((c[a] as isize + r) as usize).min(self.dims[a] - 1);
        for i in lo(0)..=hi(0) {
            for j in lo(1)..=hi(1) {
                for k in lo(2)..=hi(2) {
                    let cheb = (i as isize - c[0] as isize)
                        .abs()
                        .max((j as isize - c[1] as isize).abs())
                        .max((k as isize - c[2] as isize).abs());
                    if cheb != r {
                        continue;
                    }
                    let f = flat([i, j, k], self.dims);
                    let range = self.cell_start[f] as usize..self.cell_start[f + 1] as usize;
                    for &pi in &self.cell_points[range] {
                        let d = dist2(x, self.points[pi as usize]);
                        if d < *best {
                            *best = d;
                        }
                    }
                }
            }
        }
    }

    /// Lower bound on the distance from `x` to any cell outside the block of
    /// Chebyshev radius `r` around `c`; `None` when that block covers the grid.
    fn unsearched_bound(&self, c: [usize; 3], r: usize, x: [f64; 3]) -> Option<f64> {
        let mut bound: Option<f64> = None;
        for a in 0..3 {
            if c[a] > r {
                let face = self.origin[a] + (c[a] - r) as f64 * self.cell;
                let d = (x[a] - face).max(0.0);
                bound = Some(bound.map_or(d, |b| b.min(d)));
            }
            if c[a] + r < self.dims[a] - 1 {
                let face = self.origin[a] + (c[a] + r + 1) as f64 * self.cell;
                let d = (face - x[a]).max(0.0);
                bound = Some(bound.map_or(d, |b| b.min(d)));
            }
        }
        bound
    }
}

fn cell_coords(p: &[f64; 3], origin: [f64; 3], cell: f64, dims: [usize; 3]) -> [usize; 3] {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let v = ((p[a] - origin[a]) / cell).floor();
        c[a] = if v <= 0.0 {
            0
        } else {
            (v as usize).min(dims[a] - 1)
        };
    }
    c
}

#[inline]
fn flat(c: [usize; 3], dims: [usize; 3]) -> usize {
    (c[0] * dims[1] + c[1]) * dims[2] + c[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_linear_scan_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 600 + trial * 37;
            // Thin slab so most cells are empty.
            let pts: Vec<Point> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.01..0.01),
                    ]
                })
                .collect();
            let lin = NearestNeighbors::linear(&pts);
            let grid = NearestNeighbors::grid(&pts);
            for _ in 0..200 {
                let q = [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                ];
                assert_eq!(lin.nearest_sq(q).to_bits(), grid.nearest_sq(q).to_bits());
            }
        }
    }

    #[test]
    fn coincident_points_build_a_single_cell() {
        let pts = vec![[0.5f32, 0.5, 0.5]; 700];
        let g = NearestNeighbors::grid(&pts);
        assert_eq!(g.nearest_sq([0.5, 0.5, 1.5]), 1.0);
    }
}
