//! Density-based clustering with canonical cluster numbering.
//!
//! A point's neighbourhood includes itself and every point at distance ≤ eps.
//! Clusters are numbered by their lexicographically smallest core point, so
//! the labelling (not just the partition) is independent of input order.
//! A border point reachable from several clusters joins the lowest-numbered.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::geometry::{Point, PointCloud};

/// Cluster assignment of one point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Noise,
    Cluster(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub labels: Vec<Label>,
    pub clusters: usize,
}

impl Clustering {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Noise).count()
    }
}

pub fn dbscan(points: &PointCloud, eps: f64, min_pts: usize) -> Clustering {
    dbscan_points(points.points(), eps, min_pts)
}

pub fn dbscan_points(points: &[Point], eps: f64, min_pts: usize) -> Clustering {
    assert!(eps > 0.0 && min_pts >= 1, "dbscan needs eps > 0 and min_pts >= 1");
    let neighbors = CellIndex::new(points, eps).all_neighbors();
    let core: Vec<bool> = neighbors.iter().map(|n| n.len() >= min_pts).collect();
    label_from_neighbors(points, &neighbors, &core)
}

/// Connected components of the core graph, canonical numbering, then border
/// assignment. Shared with the brute-force oracle only through this contract,
/// not through code.
fn label_from_neighbors(points: &[Point], neighbors: &[Vec<usize>], core: &[bool]) -> Clustering {
    let n = points.len();
    let mut comp = vec![usize::MAX; n];
    let mut reps: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if !core[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = reps.len();
        let mut rep = start;
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            if lex_cmp(&points[p], &points[rep]) == Ordering::Less {
                rep = p;
            }
            for &q in &neighbors[p] {
                if core[q] && comp[q] == usize::MAX {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        reps.push(rep);
    }

    let mut order: Vec<usize> = (0..reps.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[reps[a]], &points[reps[b]]));
    let mut rank = vec![0; reps.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }

    let labels = (0..n)
        .map(|p| {
            if core[p] {
                Label::Cluster(rank[comp[p]])
            } else {
                neighbors[p]
                    .iter()
                    .filter(|&&q| core[q])
                    .map(|&q| rank[comp[q]])
                    .min()
                    .map_or(Label::Noise, Label::Cluster)
            }
        })
        .collect();
    Clustering {
        labels,
        clusters: reps.len(),
    }
}

pub(crate) fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

#[inline]
pub(crate) fn within(a: &Point, b: &Point, eps2: f64) -> bool {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz <= eps2
}

/// Hash grid with cell side eps; neighbours lie in the 27 surrounding cells.
struct CellIndex<'a> {
    points: &'a [Point],
    eps: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> CellIndex<'a> {
    fn new(points: &'a [Point], eps: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        CellIndex { points, eps, cells }
    }

    fn key(p: &Point, eps: f64) -> [i64; 3] {
        [
            (p[0] as f64 / eps).floor() as i64,
            (p[1] as f64 / eps).floor() as i64,
            (p[2] as f64 / eps).floor() as i64,
        ]
    }

    fn all_neighbors(&self) -> Vec<Vec<usize>> {
        let eps2 = self.eps * self.eps;
        self.points
            .iter()
            .map(|p| {
                let k = Self::key(p, self.eps);
                let mut out = Vec::new();
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                                out.extend(
                                    ids.iter().copied().filter(|&q| within(p, &self.points[q], eps2)),
                                );
                            }
                        }
                    }
                }
                out.sort_unstable();
                out
            })
            .collect()
    }
}

/// True when two labellings induce the same partition (ids may differ).
pub fn same_partition(a: &[Label], b: &[Label]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: HashMap<Label, Label> = HashMap::new();
    let mut back: HashMap<Label, Label> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        if (*x == Label::Noise) != (*y == Label::Noise) {
            return false;
        }
        if *fwd.entry(*x).or_insert(*y) != *y || *back.entry(*y).or_insert(*x) != *x {
            return false;
        }
    }
    true
}
