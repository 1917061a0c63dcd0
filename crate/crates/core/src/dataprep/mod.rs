//! From raw labelled part groups to the query-side item set and the
//! candidate-side warehouse.

mod bundle;
pub mod dbscan;
pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bundle::{part_from_bytes, part_to_bytes, read_part, write_part};
pub use dbscan::{dbscan, Clustering, Label};
pub use synth::generate_synthetic;

use crate::error::{Error, Result};
use crate::geometry::{
    aabb, canonical_axis, normalize_part, Point, PointCloud, PoseMeta,
};

pub const MAX_PARTS_PER_OBJECT: usize = 20;

/// A normalized part with its pose in the object frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub cloud: PointCloud,
    pub pose: PoseMeta,
    pub part_label: u16,
    pub object_class: u16,
    pub source_object: String,
    pub part_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAssembly {
    pub object_class: u16,
    pub parts: Vec<Part>,
    pub object_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTables {
    pub classes: Vec<String>,
    pub part_labels: Vec<String>,
}

impl LabelTables {
    /// Tables in order of first appearance.
    pub fn from_raw(raw: &[RawObject]) -> Self {
        let mut classes: Vec<String> = Vec::new();
        let mut part_labels: Vec<String> = Vec::new();
        for o in raw {
            if !classes.contains(&o.class) {
                classes.push(o.class.clone());
            }
            for g in &o.groups {
                if !part_labels.contains(&g.label) {
                    part_labels.push(g.label.clone());
                }
            }
        }
        LabelTables {
            classes,
            part_labels,
        }
    }

    pub fn class_id(&self, name: &str) -> Option<u16> {
        self.classes.iter().position(|c| c == name).map(|i| i as u16)
    }

    pub fn part_label_id(&self, name: &str) -> Option<u16> {
        self.part_labels.iter().position(|c| c == name).map(|i| i as u16)
    }
}

/// Items, warehouse and the held-out subset of items used for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub items: Vec<ObjectAssembly>,
    pub warehouse: Vec<Part>,
    pub labels: LabelTables,
    pub holdout: BTreeSet<String>,
    pub excluded: Vec<Excluded>,
}

impl DatasetPair {
    pub fn train_items(&self) -> impl Iterator<Item = &ObjectAssembly> {
        self.items.iter().filter(|o| !self.holdout.contains(&o.object_id))
    }

    pub fn test_items(&self) -> impl Iterator<Item = &ObjectAssembly> {
        self.items.iter().filter(|o| self.holdout.contains(&o.object_id))
    }

    /// Warehouse parts whose source object is not held out.
    pub fn train_warehouse(&self) -> Vec<&Part> {
        self.warehouse
            .iter()
            .filter(|p| !self.holdout.contains(&p.source_object))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub object_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawGroup {
    pub label: String,
    pub points: Vec<Point>,
    /// Number of primitives fused into this group, when known.
    #[serde(default = "one")]
    pub pieces: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub object_id: String,
    pub class: String,
    pub groups: Vec<RawGroup>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataParams {
    /// DBSCAN eps as a fraction of the group's box diagonal.
    pub eps_fraction: f64,
    pub min_pts: usize,
    /// Parts with fewer points are discarded.
    pub min_points: usize,
    /// Share of items per class held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            eps_fraction: 0.05,
            min_pts: 5,
            min_points: 10,
            holdout_fraction: 0.2,
        }
    }
}

/// Splits a fused group into its density-connected pieces. Noise points join
/// the cluster with the nearest centroid; with no cluster the group is
/// returned whole.
pub fn split_part_group(group: &PointCloud, eps_fraction: f64, min_pts: usize) -> Vec<PointCloud> {
    let diag = aabb(group).diagonal();
    if !(diag > 0.0) {
        return vec![group.clone()];
    }
    let c = dbscan(group, eps_fraction * diag, min_pts);
    if c.clusters == 0 {
        return vec![group.clone()];
    }
    let mut members: Vec<Vec<Point>> = vec![Vec::new(); c.clusters];
    let mut noise = Vec::new();
    for (p, l) in group.points().iter().zip(&c.labels) {
        match l {
            Label::Cluster(id) => members[*id].push(*p),
            Label::Noise => noise.push(*p),
        }
    }
    let centroids: Vec<[f64; 3]> = members
        .iter()
        .map(|m| PointCloud::new(m.clone()).expect("clusters are non-empty").centroid())
        .collect();
    for p in noise {
        let x = p.map(|v| v as f64);
        let nearest = (0..centroids.len())
            .min_by(|&a, &b| {
                crate::geometry::nn_dist2(x, centroids[a])
                    .total_cmp(&crate::geometry::nn_dist2(x, centroids[b]))
            })
            .unwrap();
        members[nearest].push(p);
    }
    members
        .into_iter()
        .map(|m| PointCloud::new(m).expect("clusters are non-empty"))
        .collect()
}

pub fn filter_small_parts(parts: Vec<PointCloud>, min_points: usize) -> Vec<PointCloud> {
    parts.into_iter().filter(|p| p.len() >= min_points).collect()
}

struct PreparedPart {
    cloud: PointCloud,
    pose: PoseMeta,
    label: u16,
}

fn prepare_object(
    obj: &RawObject,
    labels: &LabelTables,
    params: &DataParams,
) -> Result<(Vec<PreparedPart>, Vec<String>)> {
    let mut warnings = Vec::new();
    let all: Vec<Point> = obj.groups.iter().flat_map(|g| g.points.iter().copied()).collect();
    let whole = PointCloud::new(all).map_err(|e| {
        Error::InvalidInput(format!("object {}: {e}", obj.object_id))
    })?;
    let (_, frame) = normalize_part(&whole)?;
    let inv = 1.0 / frame.scale;
    let offset = frame.centroid.map(|c| -c * inv);

    let mut out = Vec::new();
    for g in &obj.groups {
        let label = labels.part_label_id(&g.label).ok_or_else(|| {
            Error::Config(format!("object {}: unknown part label {:?}", obj.object_id, g.label))
        })?;
        let cloud = PointCloud::new(g.points.clone())?.scaled_translated(inv, offset);
        let pieces = split_part_group(&cloud, params.eps_fraction, params.min_pts);
        let before = pieces.len();
        let kept = filter_small_parts(pieces, params.min_points);
        if kept.len() < before {
            warnings.push(format!(
                "{}: dropped {} small piece(s) of {}",
                obj.object_id,
                before - kept.len(),
                g.label
            ));
        }
        for piece in kept {
            let prepared = normalize_part(&piece).and_then(|(n, norm)| {
                let (axis, kind) = canonical_axis(&n)?;
                Ok(PreparedPart {
                    pose: PoseMeta {
                        centroid: norm.centroid.map(|v| v as f32),
                        scale: norm.scale as f32,
                        axis: axis.map(|v| v as f32),
                        axis_kind: kind,
                    },
                    cloud: n,
                    label,
                })
            });
            match prepared {
                Ok(p) => out.push(p),
                Err(e) => warnings.push(format!("{}: skipped a {} piece: {e}", obj.object_id, g.label)),
            }
        }
    }
    Ok((out, warnings))
}

/// Splits, filters and normalizes every raw object. Each resulting part is
/// registered in the warehouse; objects left with fewer than two (or more than
/// [`MAX_PARTS_PER_OBJECT`]) parts are excluded from the items.
pub fn build_datasets(raw: &[RawObject], params: &DataParams, seed: u64) -> Result<DatasetPair> {
    let labels = LabelTables::from_raw(raw);
    if labels.classes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two object classes, found {}",
            labels.classes.len()
        )));
    }
    if !(0.0..1.0).contains(&params.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
    }
    let prepared: Vec<_> = raw
        .par_iter()
        .map(|o| prepare_object(o, &labels, params))
        .collect::<Result<Vec<_>>>()?;

    let mut items = Vec::new();
    let mut warehouse = Vec::new();
    let mut excluded = Vec::new();
    let mut next_id = 0u64;
    for (obj, (parts, warnings)) in raw.iter().zip(prepared) {
        for w in warnings {
            log::warn!("{w}");
        }
        let class = labels.class_id(&obj.class).expect("table built from raw");
        let parts: Vec<Part> = parts
            .into_iter()
            .map(|p| {
                let part = Part {
                    cloud: p.cloud,
                    pose: p.pose,
                    part_label: p.label,
                    object_class: class,
                    source_object: obj.object_id.clone(),
                    part_id: next_id,
                };
                next_id += 1;
                part
            })
            .collect();
        warehouse.extend(parts.iter().cloned());
        if parts.len() < 2 || parts.len() > MAX_PARTS_PER_OBJECT {
            let reason = format!("{} part(s) after splitting and filtering", parts.len());
            log::warn!("excluding {} from items: {reason}", obj.object_id);
            excluded.push(Excluded {
                object_id: obj.object_id.clone(),
                reason,
            });
            continue;
        }
        items.push(ObjectAssembly {
            object_class: class,
            parts,
            object_id: obj.object_id.clone(),
        });
    }
    let holdout = stratified_holdout(&items, params.holdout_fraction, seed);
    Ok(DatasetPair {
        items,
        warehouse,
        labels,
        holdout,
        excluded,
    })
}

fn stratified_holdout(items: &[ObjectAssembly], fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut by_class: HashMap<u16, Vec<&str>> = HashMap::new();
    for o in items {
        by_class.entry(o.object_class).or_default().push(&o.object_id);
    }
    let mut classes: Vec<u16> = by_class.keys().copied().collect();
    classes.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    for c in classes {
        let mut ids = by_class.remove(&c).unwrap();
        ids.shuffle(&mut rng);
        let take = (ids.len() as f64 * fraction).round() as usize;
        out.extend(ids.into_iter().take(take).map(str::to_string));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub labels: LabelTables,
    pub parts: Vec<PartEntry>,
    pub items: Vec<ItemEntry>,
    pub holdout: Vec<String>,
    pub excluded: Vec<Excluded>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartEntry {
    pub part_id: u64,
    pub source_object: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub object_id: String,
    pub object_class: u16,
    pub part_ids: Vec<u64>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

impl DatasetPair {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("parts"))?;
        let mut parts = Vec::with_capacity(self.warehouse.len());
        for p in &self.warehouse {
            let rel = format!("parts/{:06}.part", p.part_id);
            write_part(&dir.join(&rel), p)?;
            parts.push(PartEntry {
                part_id: p.part_id,
                source_object: p.source_object.clone(),
                path: rel,
            });
        }
        let manifest = DatasetManifest {
            version: 1,
            labels: self.labels.clone(),
            parts,
            items: self
                .items
                .iter()
                .map(|o| ItemEntry {
                    object_id: o.object_id.clone(),
                    object_class: o.object_class,
                    part_ids: o.parts.iter().map(|p| p.part_id).collect(),
                })
                .collect(),
            holdout: self.holdout.iter().cloned().collect(),
            excluded: self.excluded.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(dir.join(DATASET_MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&std::fs::read(dir.join(DATASET_MANIFEST))?)?;
        let warehouse: Vec<Part> = manifest
            .parts
            .par_iter()
            .map(|e| {
                let mut p = read_part(&dir.join(&e.path))?;
                if p.part_id != e.part_id {
                    return Err(Error::InvalidInput(format!(
                        "{}: bundle holds part {} but manifest says {}",
                        e.path, p.part_id, e.part_id
                    )));
                }
                if p.part_label as usize >= manifest.labels.part_labels.len()
                    || p.object_class as usize >= manifest.labels.classes.len()
                {
                    return Err(Error::InvalidInput(format!(
                        "part {}: labels outside the dataset tables",
                        p.part_id
                    )));
                }
                p.source_object = e.source_object.clone();
                Ok(p)
            })
            .collect::<Result<_>>()?;
        let by_id: HashMap<u64, usize> = warehouse
            .iter()
            .enumerate()
            .map(|(i, p)| (p.part_id, i))
            .collect();
        let items = manifest
            .items
            .iter()
            .map(|it| {
                let parts = it
                    .part_ids
                    .iter()
                    .map(|id| {
                        by_id
                            .get(id)
                            .map(|&i| warehouse[i].clone())
                            .ok_or(Error::UnknownPart(*id))
                    })
                    .collect::<Result<_>>()?;
                Ok(ObjectAssembly {
                    object_class: it.object_class,
                    parts,
                    object_id: it.object_id.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetPair {
            items,
            warehouse,
            labels: manifest.labels,
            holdout: manifest.holdout.into_iter().collect(),
            excluded: manifest.excluded,
        })
    }
}

pub fn save_raw(path: &Path, raw: &[RawObject]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec(raw)?)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Vec<RawObject>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
