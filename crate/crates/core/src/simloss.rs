//! Stage-1 objective: the similarity matrix of unit features regressed onto a
//! target that is 1 for same-label pairs and a chamfer kernel otherwise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_points, Point, Reduction};
use crate::gradcore::{Tape, Tensor, Var};

/// Pairs sampled per category when estimating the kernel endpoints.
pub const DEFAULT_SUBSET: usize = 1000;

/// Features must be unit norm within this.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    /// Mean chamfer distance of same-label pairs.
    pub d_l: f64,
    /// Mean chamfer distance of different-label pairs.
    pub d_h: f64,
    pub subset_size: usize,
    pub seed: u64,
}

impl DistanceStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_l >= 0.0 && self.d_h.is_finite()) {
            return Err(Error::DegenerateStats(self.d_h - self.d_l));
        }
        if self.d_h - self.d_l <= 0.0 {
            return Err(Error::DegenerateStats(self.d_h - self.d_l));
        }
        Ok(())
    }
}

/// How clouds are compared when estimating statistics and building targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferOpts {
    pub reduction: Reduction,
    /// Strided subsample size per cloud; 0 keeps every point.
    pub max_points: usize,
}

impl Default for ChamferOpts {
    fn default() -> Self {
        ChamferOpts {
            reduction: Reduction::Mean,
            max_points: 0,
        }
    }
}

fn strided(points: &[Point], max: usize) -> Vec<Point> {
    if max == 0 || points.len() <= max {
        return points.to_vec();
    }
    let n = points.len();
    (0..max).map(|i| points[i * n / max]).collect()
}

/// Samples `subset_size` matched and `subset_size` mismatched pairs and
/// averages their chamfer distances. Clouds are expected to be normalized.
///
/// Matched pairs are uniform over all same-label pairs: a label is drawn with
/// weight `n(n-1)` and then two distinct members of it.
pub fn estimate_distance_stats(
    clouds: &[&[Point]],
    labels: &[u16],
    subset_size: usize,
    seed: u64,
    opts: ChamferOpts,
) -> Result<DistanceStats> {
    if clouds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "estimate_distance_stats",
            detail: format!("{} clouds, {} labels", clouds.len(), labels.len()),
        });
    }
    if subset_size < 2 {
        return Err(Error::CannotEstimate(format!("subset_size {subset_size} < 2")));
    }
    let mut by_label: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::CannotEstimate(format!(
            "need at least two part labels, found {}",
            by_label.len()
        )));
    }
    let groups: Vec<&Vec<usize>> = by_label.values().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        return Err(Error::CannotEstimate("no label has two parts".into()));
    }
    let weights: Vec<f64> = groups.iter().map(|g| (g.len() * (g.len() - 1)) as f64).collect();
    let total: f64 = weights.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matched = Vec::with_capacity(subset_size);
    for _ in 0..subset_size {
        let mut r = rng.random_range(0.0..total);
        let mut gi = 0;
        while gi + 1 < groups.len() && r >= weights[gi] {
            r -= weights[gi];
            gi += 1;
        }
        let g = groups[gi];
        let a = rng.random_range(0..g.len());
        let mut b = rng.random_range(0..g.len() - 1);
        if b >= a {
            b += 1;
        }
        matched.push((g[a], g[b]));
    }
    let mut mismatched = Vec::with_capacity(subset_size);
    while mismatched.len() < subset_size {
        let a = rng.random_range(0..clouds.len());
        let b = rng.random_range(0..clouds.len());
        if labels[a] != labels[b] {
            mismatched.push((a, b));
        }
    }

    let sub: Vec<Vec<Point>> = clouds.par_iter().map(|c| strided(c, opts.max_points)).collect();
    let mean = |pairs: &[(usize, usize)]| -> Result<f64> {
        let ds = pairs
            .par_iter()
            .map(|&(a, b)| chamfer_points(&sub[a], &sub[b], opts.reduction))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ds.iter().sum::<f64>() / ds.len() as f64)
    };
    let stats = DistanceStats {
        d_l: mean(&matched)?,
        d_h: mean(&mismatched)?,
        subset_size,
        seed,
    };
    stats.validate()?;
    Ok(stats)
}

/// Chamfer kernel mapping a distance to a target similarity in [0, 1].
///
/// The distance is clamped into `[d_l, d_h]` first. Evaluated as a ratio of
/// `expm1` terms, which equals the exponential form but does not overflow
/// for large `k·d_h`.
pub fn soft_target(d: f64, k: f64, stats: &DistanceStats) -> Result<f64> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::InvalidInput(format!("steepness must be positive, got {k}")));
    }
    if d.is_nan() {
        return Err(Error::NonFinite("soft_target distance".into()));
    }
    stats.validate()?;
    let d = d.clamp(stats.d_l, stats.d_h);
    let num = (k * (d - stats.d_h)).exp_m1();
    let den = (k * (stats.d_l - stats.d_h)).exp_m1();
    Ok((num / den).clamp(0.0, 1.0))
}

/// Symmetric `N×N` target with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatrix {
    n: usize,
    values: Vec<f64>,
}

impl TargetMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square")
    }
}

/// Chamfer distances of all cross-label pairs (upper triangle, row-major);
/// same-label entries are left at 0 and never read.
pub fn cross_label_distances(clouds: &[&[Point]], labels: &[u16], opts: ChamferOpts) -> Result<Vec<f64>> {
    let n = clouds.len();
    let sub: Vec<Vec<Point>> = clouds.par_iter().map(|c| strided(c, opts.max_points)).collect();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| labels[i] != labels[j])
        .collect();
    let ds = pairs
        .par_iter()
        .map(|&(i, j)| chamfer_points(&sub[i], &sub[j], opts.reduction))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = vec![0.0; n * n];
    for (&(i, j), d) in pairs.iter().zip(ds) {
        out[i * n + j] = d;
        out[j * n + i] = d;
    }
    Ok(out)
}

/// Target from precomputed pairwise distances (`N×N`, symmetric).
pub fn target_from_distances(dist: &[f64], labels: &[u16], k: f64, stats: &DistanceStats) -> Result<TargetMatrix> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "target_from_distances",
            detail: format!("{} distances for {n} parts", dist.len()),
        });
    }
    let mut values = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                let g = soft_target(dist[i * n + j], k, stats)?;
                values[i * n + j] = g;
                values[j * n + i] = g;
            }
        }
    }
    Ok(TargetMatrix { n, values })
}

pub fn build_target_matrix(
    clouds: &[&[Point]],
    labels: &[u16],
    k: f64,
    stats: &DistanceStats,
    opts: ChamferOpts,
) -> Result<TargetMatrix> {
    if clouds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "build_target_matrix",
            detail: format!("{} clouds, {} labels", clouds.len(), labels.len()),
        });
    }
    let dist = cross_label_distances(clouds, labels, opts)?;
    target_from_distances(&dist, labels, k, stats)
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("feature {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Records `(1/N²)·Σ(S − G)²` with `S = F·Fᵀ` for features `[N, d]`.
pub fn similarity_loss(tape: &mut Tape, features: Var, target: &TargetMatrix) -> Result<Var> {
    let f = tape.value(features);
    if f.shape().len() != 2 || f.rows() != target.n() {
        return Err(Error::ShapeMismatch {
            op: "similarity_loss",
            detail: format!("features {:?} against a {}×{} target", f.shape(), target.n(), target.n()),
        });
    }
    check_unit_rows(f)?;
    let s = tape.matmul_nt(features, features)?;
    let g = tape.constant(target.to_tensor())?;
    tape.squared_error(s, g)
}

/// Plain evaluation of the loss, for reporting.
pub fn similarity_loss_value(features: &[Vec<f32>], target: &TargetMatrix) -> Result<f64> {
    let n = features.len();
    if n != target.n() {
        return Err(Error::ShapeMismatch {
            op: "similarity_loss",
            detail: format!("{n} features against a {}×{} target", target.n(), target.n()),
        });
    }
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.iter().map(|v| *v as f64).collect()).collect();
    check_unit_rows(&Tensor::from_rows(&rows)?)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            total += (s - target.get(i, j)).powi(2);
        }
    }
    Ok(total / (n * n) as f64)
}

/// Linear steepness ramp from `k_start` at epoch 0 to `k_end` at epoch `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteepnessSchedule {
    pub k_start: f64,
    pub k_end: f64,
    pub total: usize,
}

impl Default for SteepnessSchedule {
    fn default() -> Self {
        SteepnessSchedule {
            k_start: 1.0,
            k_end: 10.0,
            total: 49,
        }
    }
}

impl SteepnessSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_start > 0.0 && self.k_start <= self.k_end) {
            return Err(Error::Config(format!(
                "steepness needs 0 < k_start ≤ k_end, got {} and {}",
                self.k_start, self.k_end
            )));
        }
        Ok(())
    }
}

pub fn steepness_at(epoch: usize, schedule: &SteepnessSchedule) -> Result<f64> {
    schedule.validate()?;
    if epoch > schedule.total {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} beyond schedule end {}",
            schedule.total
        )));
    }
    if schedule.total == 0 {
        return Ok(schedule.k_end);
    }
    let t = epoch as f64 / schedule.total as f64;
    Ok(schedule.k_start + (schedule.k_end - schedule.k_start) * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_stats() -> DistanceStats {
        DistanceStats {
            d_l: 0.0,
            d_h: 1.0,
            subset_size: 2,
            seed: 0,
        }
    }

    #[test]
    fn kernel_endpoints_and_midpoint() {
        let s = unit_stats();
        assert_eq!(soft_target(0.0, 1.0, &s).unwrap(), 1.0);
        assert_eq!(soft_target(1.0, 1.0, &s).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let want = (e - e.sqrt()) / (e - 1.0);
        assert!((soft_target(0.5, 1.0, &s).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.62245).abs() < 1e-5);
        // clamped outside the interval
        assert_eq!(soft_target(-3.0, 2.0, &s).unwrap(), 1.0);
        assert_eq!(soft_target(7.0, 2.0, &s).unwrap(), 0.0);
        // no overflow at large k·d_h
        let far = DistanceStats { d_l: 10.0, d_h: 90.0, ..s };
        let v = soft_target(89.9, 10.0, &far).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn kernel_errors() {
        let flat = DistanceStats { d_l: 0.3, d_h: 0.3, ..unit_stats() };
        assert!(matches!(soft_target(0.3, 1.0, &flat), Err(Error::DegenerateStats(_))));
        assert!(soft_target(0.3, 0.0, &unit_stats()).is_err());
    }

    #[test]
    fn steepness_is_linear() {
        let s = SteepnessSchedule { k_start: 1.0, k_end: 10.0, total: 10 };
        assert_eq!(steepness_at(0, &s).unwrap(), 1.0);
        assert_eq!(steepness_at(10, &s).unwrap(), 10.0);
        assert_eq!(steepness_at(5, &s).unwrap(), 5.5);
        assert!(steepness_at(11, &s).is_err());
        assert!(SteepnessSchedule { k_start: 2.0, k_end: 1.0, total: 3 }.validate().is_err());
    }

    #[test]
    fn loss_fixtures() {
        let same = TargetMatrix { n: 2, values: vec![1.0; 4] };
        let l = similarity_loss_value(&[vec![1.0, 0.0], vec![0.0, 1.0]], &same).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        let cross = TargetMatrix { n: 2, values: vec![1.0, 0.0, 0.0, 1.0] };
        let l = similarity_loss_value(&[vec![0.0, 1.0], vec![0.0, 1.0]], &cross).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        let one = TargetMatrix { n: 1, values: vec![1.0] };
        assert_eq!(similarity_loss_value(&[vec![0.0, 1.0]], &one).unwrap(), 0.0);
        assert!(matches!(
            similarity_loss_value(&[vec![2.0, 0.0]], &one),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_loss_matches_plain_value() {
        let feats = vec![vec![0.6f32, 0.8, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let target = TargetMatrix {
            n: 3,
            values: vec![1.0, 0.2, 0.7, 0.2, 1.0, 0.0, 0.7, 0.0, 1.0],
        };
        let rows: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| *v as f64).collect()).collect();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = similarity_loss(&mut tape, f, &target).unwrap();
        let want = similarity_loss_value(&feats, &target).unwrap();
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-9);
    }

    fn line(n: usize, len: f32, y: f32) -> Vec<Point> {
        (0..n).map(|i| [len * i as f32 / n as f32, y, 0.0]).collect()
    }

    #[test]
    fn target_matrix_structure() {
        let clouds = [line(20, 1.0, 0.0), line(20, 1.0, 0.0), line(20, 0.5, 0.3), line(30, 1.0, 0.9)];
        let refs: Vec<&[Point]> = clouds.iter().map(|c| c.as_slice()).collect();
        let labels = [0u16, 0, 1, 2];
        let stats = DistanceStats { d_l: 0.0, d_h: 0.5, subset_size: 2, seed: 0 };
        let g = build_target_matrix(&refs, &labels, 3.0, &stats, ChamferOpts::default()).unwrap();
        for i in 0..4 {
            assert_eq!(g.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(g.get(i, j), g.get(j, i));
                assert!((0.0..=1.0).contains(&g.get(i, j)));
            }
        }
        assert_eq!(g.get(0, 1), 1.0);
        assert!(g.get(0, 2) > g.get(0, 3));
        let same = build_target_matrix(&refs, &[5; 4], 3.0, &stats, ChamferOpts::default()).unwrap();
        assert!(same.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn stats_on_identical_same_label_clouds() {
        let clouds = [line(10, 1.0, 0.0), line(10, 1.0, 0.0), line(10, 1.0, 0.5), line(10, 1.0, 0.5)];
        let refs: Vec<&[Point]> = clouds.iter().map(|c| c.as_slice()).collect();
        let s = estimate_distance_stats(&refs, &[0, 0, 1, 1], 50, 3, ChamferOpts::default()).unwrap();
        assert_eq!(s.d_l, 0.0);
        assert!(s.d_h > 0.0);
        let again = estimate_distance_stats(&refs, &[0, 0, 1, 1], 50, 3, ChamferOpts::default()).unwrap();
        assert_eq!(s, again);
        assert!(matches!(
            estimate_distance_stats(&refs, &[0; 4], 50, 3, ChamferOpts::default()),
            Err(Error::CannotEstimate(_))
        ));
    }
}
