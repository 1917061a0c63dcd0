//! Point-cloud math: chamfer distance, normalization, principal axes,
//! canonical alignment and axis-aligned boxes.
//!
//! Coordinates are stored as `f32` (the on-disk precision); every reduction
//! accumulates in `f64`.

mod nn;

pub use nn::{NearestNeighbors, GRID_THRESHOLD};
pub(crate) use nn::dist2 as nn_dist2;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f32; 3];

/// λ1/λ2 above which a part counts as elongated.
pub const ELONGATION_RATIO: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Validates that the cloud is non-empty with finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    /// Largest Euclidean norm over the points.
    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| norm3(nn::widen(p)))
            .fold(0.0, f64::max)
    }

    /// Applies `x -> R x` to every point.
    pub fn rotated(&self, r: &Matrix3<f64>) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let v = r * Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                [v.x as f32, v.y as f32, v.z as f32]
            })
            .collect();
        PointCloud { points }
    }

    /// Applies `x -> x * scale + offset` to every point.
    pub fn scaled_translated(&self, scale: f64, offset: [f64; 3]) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                [
                    (p[0] as f64 * scale + offset[0]) as f32,
                    (p[1] as f64 * scale + offset[1]) as f32,
                    (p[2] as f64 * scale + offset[2]) as f32,
                ]
            })
            .collect();
        PointCloud { points }
    }

    /// Deterministic strided subsample of at most `max` points.
    pub fn strided(&self, max: usize) -> PointCloud {
        if self.points.len() <= max || max == 0 {
            return self.clone();
        }
        let n = self.points.len();
        let points = (0..max).map(|i| self.points[i * n / max]).collect();
        PointCloud { points }
    }

    /// Concatenation of several clouds.
    pub fn merge<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<PointCloud> {
        let points: Vec<Point> = clouds
            .into_iter()
            .flat_map(|c| c.points.iter().copied())
            .collect();
        PointCloud::new(points)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisKind {
    Elongated,
    Planar,
}

impl AxisKind {
    pub fn to_u8(self) -> u8 {
        match self {
            AxisKind::Elongated => 0,
            AxisKind::Planar => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(AxisKind::Elongated),
            1 => Some(AxisKind::Planar),
            _ => None,
        }
    }
}

/// Original-frame pose of a normalized part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMeta {
    pub centroid: [f32; 3],
    pub scale: f32,
    pub axis: [f32; 3],
    pub axis_kind: AxisKind,
}

impl PoseMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidInput(format!(
                "pose scale must be positive, got {}",
                self.scale
            )));
        }
        if self.centroid.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("pose centroid is not finite".into()));
        }
        let n = norm3(self.axis.map(|v| v as f64));
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "pose axis must be unit length, norm is {n}"
            )));
        }
        Ok(())
    }
}

/// Translation and scale removed by [`normalize_part`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centroid: [f64; 3],
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Symmetric chamfer distance with squared nearest-neighbour terms.
///
/// `Sum` adds both directed sums; `Mean` divides each directed sum by the
/// size of the cloud it runs over.
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud, reduction: Reduction) -> Result<f64> {
    chamfer_points(p.points(), q.points(), reduction)
}

pub fn chamfer_points(p: &[Point], q: &[Point], reduction: Reduction) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::InvalidInput("chamfer distance of an empty cloud".into()));
    }
    let to_q = NearestNeighbors::new(q);
    let to_p = NearestNeighbors::new(p);
    let fwd: f64 = p.iter().map(|x| to_q.nearest_sq(nn::widen(x))).sum();
    let bwd: f64 = q.iter().map(|y| to_p.nearest_sq(nn::widen(y))).sum();
    Ok(match reduction {
        Reduction::Sum => fwd + bwd,
        Reduction::Mean => fwd / p.len() as f64 + bwd / q.len() as f64,
    })
}

/// Centers the cloud on its centroid and scales it into the unit ball.
pub fn normalize_part(p: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let c = p.centroid();
    let scale = p
        .points()
        .iter()
        .map(|x| norm3(sub3(nn::widen(x), c)))
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::DegeneratePart(
            "all points coincide, scale is zero".into(),
        ));
    }
    let inv = 1.0 / scale;
    let points = p
        .points()
        .iter()
        .map(|x| {
            [
                ((x[0] as f64 - c[0]) * inv) as f32,
                ((x[1] as f64 - c[1]) * inv) as f32,
                ((x[2] as f64 - c[2]) * inv) as f32,
            ]
        })
        .collect();
    Ok((PointCloud { points }, Normalization { centroid: c, scale }))
}

/// Inverse of [`normalize_part`].
pub fn denormalize(p: &PointCloud, n: &Normalization) -> PointCloud {
    p.scaled_translated(n.scale, n.centroid)
}

/// Eigen-decomposition of the point covariance, sorted by descending
/// eigenvalue. Eigenvectors are unit length with their largest-magnitude
/// component positive.
pub fn principal_axes(p: &PointCloud) -> Result<[(f64, [f64; 3]); 3]> {
    if p.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "principal axes need at least 3 points, got {}",
            p.len()
        )));
    }
    let cov = covariance(p);
    if cov.trace() <= 0.0 {
        return Err(Error::DegeneratePart("all points coincide".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut pairs: Vec<(f64, [f64; 3])> = (0..3)
        .map(|i| {
            let v = eig.eigenvectors.column(i).normalize();
            (eig.eigenvalues[i].max(0.0), fix_sign([v.x, v.y, v.z]))
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok([pairs[0], pairs[1], pairs[2]])
}

fn covariance(p: &PointCloud) -> Matrix3<f64> {
    let c = p.centroid();
    let mut m = Matrix3::zeros();
    for x in p.points() {
        let d = Vector3::new(x[0] as f64 - c[0], x[1] as f64 - c[1], x[2] as f64 - c[2]);
        m += d * d.transpose();
    }
    m / p.len() as f64
}

/// Elongated iff λ1 > [`ELONGATION_RATIO`]·λ2; a ratio of exactly 2 is planar.
pub fn classify_axis_kind(eigenvalues: [f64; 3]) -> AxisKind {
    if eigenvalues[0] > ELONGATION_RATIO * eigenvalues[1] {
        AxisKind::Elongated
    } else {
        AxisKind::Planar
    }
}

/// Direction used to align a part: the major axis of elongated parts, the
/// surface normal (minor axis) of planar ones.
pub fn canonical_axis(p: &PointCloud) -> Result<([f64; 3], AxisKind)> {
    let axes = principal_axes(p)?;
    let kind = classify_axis_kind([axes[0].0, axes[1].0, axes[2].0]);
    let axis = match kind {
        AxisKind::Elongated => axes[0].1,
        AxisKind::Planar => axes[2].1,
    };
    Ok((axis, kind))
}

/// Flips `v` so that its largest-magnitude component is positive.
pub fn fix_sign(v: [f64; 3]) -> [f64; 3] {
    let mut idx = 0;
    for a in 1..3 {
        if v[a].abs() > v[idx].abs() {
            idx = a;
        }
    }
    if v[idx] < 0.0 {
        v.map(|c| -c)
    } else {
        v
    }
}

/// Proper rotation taking unit vector `a` onto unit vector `b`. Antiparallel
/// inputs rotate by π about an axis perpendicular to `a`.
pub fn rotation_between(a: [f64; 3], b: [f64; 3]) -> Matrix3<f64> {
    let a = Vector3::from(a).normalize();
    let b = Vector3::from(b).normalize();
    let v = a.cross(&b);
    let c = a.dot(&b);
    if 1.0 + c < 1e-12 {
        // Perpendicular axis from the basis vector least aligned with a.
        let e = if a.x.abs() <= a.y.abs() && a.x.abs() <= a.z.abs() {
            Vector3::x()
        } else if a.y.abs() <= a.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let u = a.cross(&e).normalize();
        return 2.0 * u * u.transpose() - Matrix3::identity();
    }
    let k = v.cross_matrix();
    Matrix3::identity() + k + k * k / (1.0 + c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn diagonal(&self) -> f64 {
        norm3(sub3(self.max, self.min))
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| {
            let v = p[a] as f64;
            v >= self.min[a] && v <= self.max[a]
        })
    }
}

pub fn aabb(p: &PointCloud) -> Aabb {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for x in p.points() {
        for a in 0..3 {
            min[a] = min[a].min(x[a] as f64);
            max[a] = max[a].max(x[a] as f64);
        }
    }
    Aabb { min, max }
}

/// Expands (or shrinks) the box about its center.
pub fn scale_box(b: &Aabb, factor: f64) -> Result<Aabb> {
    if !(factor > 0.0) {
        return Err(Error::InvalidInput(format!(
            "box scale factor must be positive, got {factor}"
        )));
    }
    let c = b.center();
    let mut out = *b;
    for a in 0..3 {
        let half = 0.5 * (b.max[a] - b.min[a]) * factor;
        out.min[a] = c[a] - half;
        out.max[a] = c[a] + half;
    }
    Ok(out)
}

/// Points inside the closed box, or `None` if none are.
pub fn crop(p: &PointCloud, b: &Aabb) -> Option<PointCloud> {
    let points: Vec<Point> = p.points().iter().copied().filter(|x| b.contains(x)).collect();
    if points.is_empty() {
        None
    } else {
        Some(PointCloud { points })
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
