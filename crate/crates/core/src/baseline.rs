//! Completion-based comparison pipeline and the evaluation table.
//!
//! A surrogate stands in for a completion network: it returns the ground-truth
//! part with dialed-in noise. The completed region is cropped around the
//! missing part and matched against the warehouse either by chamfer distance
//! or by encoder feature distance. The context method ranks with the
//! classifier instead and never sees the missing geometry.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataprep::{DatasetPair, ObjectAssembly, Part};
use crate::error::{Error, Result};
use crate::geometry::{
    aabb, canonical_axis, chamfer_points, crop, normalize_part, rotation_between, scale_box, Aabb,
    Point, PointCloud, Reduction,
};
use crate::partencoder::EncoderSnapshot;
use crate::relnet::{assemble_tokens, RelNetSnapshot};
use crate::retrieval::{own_slot, rank_candidates, WarehouseIndex};

pub const DEFAULT_BBOX_FACTOR: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Per-coordinate Gaussian jitter, object units.
    pub sigma: f64,
    pub drop_fraction: f64,
    pub outlier_fraction: f64,
    pub bbox_factor: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            sigma: 0.0,
            drop_fraction: 0.0,
            outlier_fraction: 0.0,
            bbox_factor: DEFAULT_BBOX_FACTOR,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        for (name, v) in [("drop_fraction", self.drop_fraction), ("outlier_fraction", self.outlier_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.bbox_factor >= 1.0) {
            return Err(Error::Config(format!("bbox_factor must be ≥ 1, got {}", self.bbox_factor)));
        }
        Ok(())
    }
}

/// Noisy stand-in for the missing part, in the object frame: jitter, then
/// drop a fraction, then move a fraction of the rest to uniform positions in
/// the scaled bounding box of the true part.
pub fn surrogate_part(truth: &PointCloud, cfg: &SurrogateConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point> = truth.points().to_vec();
    if cfg.sigma > 0.0 {
        let n = Normal::new(0.0, cfg.sigma).expect("valid sigma");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v = (*v as f64 + n.sample(&mut rng)) as f32;
            }
        }
    }
    if cfg.drop_fraction > 0.0 {
        let keep = ((pts.len() as f64 * (1.0 - cfg.drop_fraction)).round() as usize).max(1);
        let mut idx = rand::seq::index::sample(&mut rng, pts.len(), keep).into_vec();
        idx.sort_unstable();
        pts = idx.into_iter().map(|i| pts[i]).collect();
    }
    if cfg.outlier_fraction > 0.0 {
        let b = scale_box(&aabb(truth), cfg.bbox_factor)?;
        let count = (pts.len() as f64 * cfg.outlier_fraction).round() as usize;
        let idx = rand::seq::index::sample(&mut rng, pts.len(), count).into_vec();
        for i in idx {
            for (a, v) in pts[i].iter_mut().enumerate() {
                *v = if b.max[a] > b.min[a] {
                    rng.random_range(b.min[a]..b.max[a]) as f32
                } else {
                    b.min[a] as f32
                };
            }
        }
    }
    PointCloud::new(pts)
}

/// The object with its missing part filled in by [`surrogate_part`].
pub fn surrogate_complete(
    rest: &PointCloud,
    truth: &PointCloud,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<PointCloud> {
    let part = surrogate_part(truth, cfg, seed)?;
    PointCloud::merge([rest, &part])
}

/// Points of `completed` inside the missing part's box grown by `factor`;
/// `None` when nothing falls inside.
pub fn crop_to_roi(completed: &PointCloud, part_box: &Aabb, factor: f64) -> Result<Option<PointCloud>> {
    if !(factor >= 1.0) {
        return Err(Error::InvalidInput(format!("crop factor must be ≥ 1, got {factor}")));
    }
    Ok(crop(completed, &scale_box(part_box, factor)?))
}

/// A normalized cloud with its canonical axis, ready for aligned chamfer.
#[derive(Clone, Debug)]
pub struct AlignedCloud {
    pub points: PointCloud,
    pub axis: [f64; 3],
}

impl AlignedCloud {
    /// Normalizes `cloud`, computes its axis and keeps at most `max_points`
    /// strided points (0 keeps all).
    pub fn new(cloud: &PointCloud, max_points: usize) -> Result<Self> {
        let (norm, _) = normalize_part(cloud)?;
        let (axis, _) = canonical_axis(&norm)?;
        Ok(AlignedCloud {
            points: if max_points == 0 { norm } else { norm.strided(max_points) },
            axis,
        })
    }

    /// From a stored part, whose cloud is already normalized.
    pub fn from_part(part: &Part, max_points: usize) -> Self {
        AlignedCloud {
            points: if max_points == 0 {
                part.cloud.clone()
            } else {
                part.cloud.strided(max_points)
            },
            axis: part.pose.axis.map(|v| v as f64),
        }
    }
}

/// Chamfer distance (mean reduction) after rotating `a` so that its axis
/// matches `b`'s.
pub fn aligned_chamfer(a: &AlignedCloud, b: &AlignedCloud) -> Result<f64> {
    let r = rotation_between(a.axis, b.axis);
    let rotated = a.points.rotated(&r);
    chamfer_points(rotated.points(), b.points.points(), Reduction::Mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub part_id: u64,
    pub distance: f64,
    pub rank: usize,
}

fn finish(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.part_id.cmp(&b.part_id)));
    hits.truncate(k);
    for (i, h) in hits.iter_mut().enumerate() {
        h.rank = i;
    }
    hits
}

/// Warehouse parts in ascending aligned chamfer distance to `query`.
pub fn retrieve_by_chamfer(
    query: &AlignedCloud,
    warehouse: &[(u64, AlignedCloud)],
    k: usize,
) -> Result<Vec<Hit>> {
    if warehouse.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let hits = warehouse
        .par_iter()
        .map(|(id, c)| {
            Ok(Hit {
                part_id: *id,
                distance: aligned_chamfer(query, c)?,
                rank: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(hits, k))
}

/// Index parts in ascending Euclidean feature distance to the encoded query.
pub fn retrieve_by_feature(
    query: &PointCloud,
    encoder: &EncoderSnapshot,
    index: &WarehouseIndex,
    k: usize,
) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    index.check_encoder(encoder.hash())?;
    let (norm, _) = normalize_part(query)?;
    let f = encoder.encode(&norm)?;
    let hits = index
        .records()
        .iter()
        .map(|r| Hit {
            part_id: r.part_id,
            distance: r
                .feature
                .iter()
                .zip(&f)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
            rank: 0,
        })
        .collect();
    Ok(finish(hits, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub queries: usize,
    pub sigmas: Vec<f64>,
    pub drop_fraction: f64,
    pub outlier_fraction: f64,
    pub bbox_factor: f64,
    /// Strided points per cloud for baseline chamfer matching and scoring.
    pub chamfer_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            queries: 100,
            sigmas: vec![0.0, 0.05, 0.1],
            drop_fraction: 0.0,
            outlier_fraction: 0.0,
            bbox_factor: DEFAULT_BBOX_FACTOR,
            chamfer_points: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    /// Mean aligned chamfer distance of retrieved top-1 to the original, ×10².
    pub cd_x100: f64,
    /// Mean wall time per sample in seconds.
    pub time_s: f64,
    pub samples: usize,
}

/// One query's outcome for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub method: String,
    pub query: usize,
    pub object_id: String,
    pub removed: u64,
    pub retrieved: u64,
    pub cd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub samples: Vec<SampleResult>,
    /// Queries dropped because some method failed on them.
    pub excluded: usize,
}

pub const CONTEXT_METHOD: &str = "context";

pub fn surrogate_method(sigma: f64, kind: &str) -> String {
    format!("surrogate σ={sigma:.2} ({kind})")
}

/// Seeded single-part-removal queries over the test split: object index and
/// removed part position.
pub fn removal_queries(data: &DatasetPair, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test: Vec<usize> = data
        .items
        .iter()
        .enumerate()
        .filter(|(_, o)| data.holdout.contains(&o.object_id))
        .map(|(i, _)| i)
        .collect();
    test.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    if test.is_empty() {
        return out;
    }
    for q in 0..n {
        let obj = test[q % test.len()];
        let drop = rng.random_range(0..data.items[obj].parts.len());
        out.push((obj, drop));
    }
    out
}

fn rest_of(o: &ObjectAssembly, drop: usize) -> Result<PointCloud> {
    let placed: Vec<PointCloud> = o
        .parts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != drop)
        .map(|(_, p)| p.cloud.scaled_translated(p.pose.scale as f64, p.pose.centroid.map(|v| v as f64)))
        .collect();
    PointCloud::merge(placed.iter())
}

/// Runs the context method and both baselines at every noise level on the
/// same queries. A query is kept only if every method produced a result.
pub fn evaluate_all(
    data: &DatasetPair,
    encoder: &EncoderSnapshot,
    relnet: &RelNetSnapshot,
    index: &WarehouseIndex,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    index.check_encoder(encoder.hash())?;
    let by_id: BTreeMap<u64, &Part> = data.warehouse.iter().map(|p| (p.part_id, p)).collect();
    let aligned: Vec<(u64, AlignedCloud)> = index
        .records()
        .par_iter()
        .map(|r| {
            let p = by_id.get(&r.part_id).ok_or(Error::UnknownPart(r.part_id))?;
            Ok((r.part_id, AlignedCloud::from_part(p, cfg.chamfer_points)))
        })
        .collect::<Result<Vec<_>>>()?;
    let aligned_by_id: BTreeMap<u64, &AlignedCloud> = aligned.iter().map(|(i, c)| (*i, c)).collect();
    let score = |retrieved: u64, truth: u64| -> Result<f64> {
        let a = aligned_by_id.get(&retrieved).ok_or(Error::UnknownPart(retrieved))?;
        let b = aligned_by_id.get(&truth).ok_or(Error::UnknownPart(truth))?;
        aligned_chamfer(a, b)
    };

    let mut methods = vec![CONTEXT_METHOD.to_string()];
    for &s in &cfg.sigmas {
        methods.push(surrogate_method(s, "CD"));
        methods.push(surrogate_method(s, "Enc"));
    }
    let mut samples = Vec::new();
    let mut times: BTreeMap<String, f64> = BTreeMap::new();
    let mut excluded = 0;
    for (q, (obj, drop)) in removal_queries(data, cfg.queries, cfg.seed).into_iter().enumerate() {
        let o = &data.items[obj];
        let truth = &o.parts[drop];
        let outcome = (|| -> Result<Vec<(String, u64, f64)>> {
            let mut out = Vec::new();
            let t = Instant::now();
            let rest: Vec<(Vec<f32>, [f32; 3])> = o
                .parts
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != drop)
                .map(|(_, p)| {
                    let r = index.get(p.part_id).ok_or(Error::UnknownPart(p.part_id))?;
                    Ok((r.feature.clone(), p.pose.centroid))
                })
                .collect::<Result<_>>()?;
            let seq = assemble_tokens(rest.iter().map(|(f, c)| (f.as_slice(), *c)))?;
            let top = rank_candidates(&seq, &own_slot(truth), o.object_class, index, relnet, 1)?;
            out.push((CONTEXT_METHOD.to_string(), top[0].part_id, t.elapsed().as_secs_f64()));

            let rest_cloud = rest_of(o, drop)?;
            let truth_obj = truth
                .cloud
                .scaled_translated(truth.pose.scale as f64, truth.pose.centroid.map(|v| v as f64));
            let part_box = aabb(&truth_obj);
            for (si, &sigma) in cfg.sigmas.iter().enumerate() {
                let sc = SurrogateConfig {
                    sigma,
                    drop_fraction: cfg.drop_fraction,
                    outlier_fraction: cfg.outlier_fraction,
                    bbox_factor: cfg.bbox_factor,
                };
                let seed = cfg.seed ^ ((q as u64) << 20) ^ si as u64;
                // Completion and cropping are shared by both baselines and
                // charged to each.
                let t = Instant::now();
                let completed = surrogate_complete(&rest_cloud, &truth_obj, &sc, seed)?;
                let roi = crop_to_roi(&completed, &part_box, cfg.bbox_factor)?
                    .ok_or_else(|| Error::InvalidInput("empty crop".into()))?;
                let shared = t.elapsed().as_secs_f64();

                let t = Instant::now();
                let query = AlignedCloud::new(&roi, cfg.chamfer_points)?;
                let hit = retrieve_by_chamfer(&query, &aligned, 1)?;
                out.push((surrogate_method(sigma, "CD"), hit[0].part_id, shared + t.elapsed().as_secs_f64()));

                let t = Instant::now();
                let hit = retrieve_by_feature(&roi, encoder, index, 1)?;
                out.push((surrogate_method(sigma, "Enc"), hit[0].part_id, shared + t.elapsed().as_secs_f64()));
            }
            Ok(out)
        })();
        match outcome {
            Ok(results) => {
                for (method, retrieved, secs) in results {
                    *times.entry(method.clone()).or_default() += secs;
                    samples.push(SampleResult {
                        method,
                        query: q,
                        object_id: o.object_id.clone(),
                        removed: truth.part_id,
                        retrieved,
                        cd: score(retrieved, truth.part_id)?,
                    });
                }
            }
            Err(e) => {
                log::warn!("query {q} ({}) skipped: {e}", o.object_id);
                excluded += 1;
            }
        }
    }
    let rows = methods
        .iter()
        .map(|m| {
            let cds: Vec<f64> = samples.iter().filter(|s| &s.method == m).map(|s| s.cd).collect();
            let n = cds.len();
            EvalRow {
                method: m.clone(),
                cd_x100: if n == 0 { 0.0 } else { 100.0 * cds.iter().sum::<f64>() / n as f64 },
                time_s: if n == 0 { 0.0 } else { times.get(m).copied().unwrap_or(0.0) / n as f64 },
                samples: n,
            }
        })
        .collect();
    Ok(EvalReport {
        rows,
        samples,
        excluded,
    })
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tCD (·10²)\ttime/sample (s)\tsamples\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{:.4}\t{:.6}\t{}\n", r.method, r.cd_x100, r.time_s, r.samples));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["method", "CD (·10²)", "time/sample (s)", "samples"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.4}", r.cd_x100),
                    format!("{:.6}", r.time_s),
                    r.samples.to_string(),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| {
            row.iter()
                .zip(width)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        out.push_str(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        if self.excluded > 0 {
            out.push_str(&format!("{} queries excluded\n", self.excluded));
        }
        out
    }

    /// SHA-256 over everything except wall-clock times, which vary between
    /// otherwise identical runs.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(format!("{}\t{:e}\t{}\n", r.method, r.cd_x100, r.samples));
        }
        for s in &self.samples {
            h.update(format!("{}\t{}\t{}\t{}\t{:e}\n", s.method, s.query, s.removed, s.retrieved, s.cd));
        }
        h.update(self.excluded.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slab(n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|i| {
                let t = i as f32 / n as f32;
                [t, 0.1 * (i % 7) as f32 / 7.0, 0.02 * (i % 3) as f32]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn clean_surrogate_is_exact_and_seeded() {
        let truth = slab(200);
        let clean = surrogate_part(&truth, &SurrogateConfig::default(), 3).unwrap();
        assert_eq!(clean, truth);
        let cfg = SurrogateConfig { sigma: 0.05, drop_fraction: 0.2, outlier_fraction: 0.1, ..Default::default() };
        let a = surrogate_part(&truth, &cfg, 4).unwrap();
        assert_eq!(a, surrogate_part(&truth, &cfg, 4).unwrap());
        assert_eq!(a.len(), 160);
        assert!(SurrogateConfig { sigma: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn noise_increases_distance() {
        let truth = slab(300);
        let mut last = 0.0;
        for sigma in [0.01, 0.05, 0.1] {
            let cfg = SurrogateConfig { sigma, ..Default::default() };
            let s = surrogate_part(&truth, &cfg, 9).unwrap();
            let d = chamfer_points(s.points(), truth.points(), Reduction::Mean).unwrap();
            assert!(d > last, "{sigma}: {d} after {last}");
            last = d;
        }
    }

    #[test]
    fn crop_keeps_part_and_drops_far_outliers() {
        let truth = slab(100);
        let b = aabb(&truth);
        let kept = crop_to_roi(&truth, &b, 1.1).unwrap().unwrap();
        assert_eq!(kept.len(), truth.len());
        let mut pts = truth.points().to_vec();
        pts.push([5.0, 5.0, 5.0]);
        pts.push([-3.0, 0.0, 0.0]);
        let noisy = PointCloud::new(pts).unwrap();
        assert_eq!(crop_to_roi(&noisy, &b, 1.1).unwrap().unwrap().len(), 100);
        let far = PointCloud::new(vec![[9.0, 9.0, 9.0]]).unwrap();
        assert!(crop_to_roi(&far, &b, 1.1).unwrap().is_none());
        assert!(crop_to_roi(&truth, &b, 0.9).is_err());
        let jittered = surrogate_part(&truth, &SurrogateConfig { sigma: 0.02, ..Default::default() }, 1).unwrap();
        let n10 = crop_to_roi(&jittered, &b, 1.0).unwrap().map_or(0, |c| c.len());
        let n11 = crop_to_roi(&jittered, &b, 1.1).unwrap().map_or(0, |c| c.len());
        assert!(n11 >= n10);
    }

    #[test]
    fn chamfer_retrieval_finds_identical_part() {
        let parts: Vec<PointCloud> = (0..5).map(|i| slab(50 + 10 * i)).collect();
        let wh: Vec<(u64, AlignedCloud)> = parts
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u64 * 3, AlignedCloud::new(c, 0).unwrap()))
            .collect();
        let q = AlignedCloud::new(&parts[2], 0).unwrap();
        let hits = retrieve_by_chamfer(&q, &wh, 5).unwrap();
        assert_eq!(hits[0].part_id, 6);
        assert!(hits[0].distance < 1e-12);
        let mut rev = wh.clone();
        rev.reverse();
        assert_eq!(retrieve_by_chamfer(&q, &rev, 5).unwrap(), hits);
        assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn tables_have_fixed_columns() {
        let report = EvalReport {
            rows: vec![EvalRow { method: "context".into(), cd_x100: 2.5, time_s: 0.01, samples: 3 }],
            samples: vec![],
            excluded: 0,
        };
        assert_eq!(report.to_tsv().lines().next().unwrap(), "method\tCD (·10²)\ttime/sample (s)\tsamples");
        assert!(report.to_text().contains("context"));
        let mut other = report.clone();
        other.rows[0].time_s = 9.0;
        assert_eq!(other.content_digest(), report.content_digest());
    }
}
