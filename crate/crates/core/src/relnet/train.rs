//! Two-stage training: the encoder on the similarity objective, then the
//! relation network on object classification with the encoder frozen.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assemble_tokens, RelNet, TokenSequence};
use crate::dataprep::{ObjectAssembly, Part};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::gradcore::{lr_schedule, Adam, AdamConfig, Tape};
use crate::partencoder::{pad_batch, EncoderSnapshot, FeatureVec, PartEncoder};
use crate::simloss::{
    build_target_matrix, estimate_distance_stats, similarity_loss, steepness_at, ChamferOpts,
    DistanceStats, SteepnessSchedule,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_batch: usize,
    pub stage2_batch: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub k_start: f64,
    pub k_end: f64,
    /// Pairs per category for the kernel endpoint estimate.
    pub stats_subset: usize,
    /// Points drawn per part for each stage-1 forward pass.
    pub train_points: usize,
    /// Strided points per part for chamfer distances in stage 1.
    pub chamfer_points: usize,
    /// Probability of removing one part from an object with at least three.
    /// Off by default: on the desk corpus it made removal queries rank worse.
    pub part_dropout: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stage1_epochs: 50,
            stage2_epochs: 20,
            stage1_batch: 64,
            stage2_batch: 32,
            lr_peak: 1e-3,
            lr_min: 1e-5,
            warmup_fraction: 0.05,
            k_start: 1.0,
            k_end: 10.0,
            stats_subset: 1000,
            train_points: 128,
            chamfer_points: 64,
            part_dropout: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stage1_epochs", self.stage1_epochs),
            ("stage2_epochs", self.stage2_epochs),
            ("stage1_batch", self.stage1_batch),
            ("stage2_batch", self.stage2_batch),
            ("train_points", self.train_points),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.stage1_batch < 2 {
            return Err(Error::Config("stage1_batch must be at least 2".into()));
        }
        if !(self.lr_peak > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_peak) {
            return Err(Error::Config("need 0 ≤ lr_min ≤ lr_peak and lr_peak > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.part_dropout) {
            return Err(Error::Config("part_dropout must be in [0, 1)".into()));
        }
        self.steepness().validate()
    }

    /// Ramp reaching `k_end` on the last stage-1 epoch.
    pub fn steepness(&self) -> SteepnessSchedule {
        SteepnessSchedule {
            k_start: self.k_start,
            k_end: self.k_end,
            total: self.stage1_epochs.saturating_sub(1),
        }
    }

    fn chamfer(&self) -> ChamferOpts {
        ChamferOpts {
            max_points: self.chamfer_points,
            ..ChamferOpts::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub k: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub stats: DistanceStats,
    pub epochs: Vec<Stage1Epoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub epochs: Vec<Stage2Epoch>,
}

/// Draws batches that cycle through labels in a shuffled order, taking the
/// next part from a per-label shuffled queue. Every label is represented
/// about equally and a batch spans several labels whenever they exist.
pub struct BalancedSampler {
    queues: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    order: Vec<usize>,
    next: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[u16], rng: &mut ChaCha8Rng) -> Self {
        let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            groups.entry(*l).or_default().push(i);
        }
        let mut queues: Vec<Vec<usize>> = groups.into_values().collect();
        for q in &mut queues {
            q.shuffle(rng);
        }
        let mut order: Vec<usize> = (0..queues.len()).collect();
        order.shuffle(rng);
        BalancedSampler {
            cursor: vec![0; queues.len()],
            queues,
            order,
            next: 0,
        }
    }

    pub fn batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            let g = self.order[self.next];
            self.next += 1;
            if self.cursor[g] == self.queues[g].len() {
                self.queues[g].shuffle(rng);
                self.cursor[g] = 0;
            }
            let pick = self.queues[g][self.cursor[g]];
            self.cursor[g] += 1;
            if !out.contains(&pick) {
                out.push(pick);
            } else if self.queues.iter().map(Vec::len).sum::<usize>() <= out.len() {
                break;
            }
        }
        out
    }
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Random subset of at most `m` points, in original order.
fn subsample(points: &[Point], m: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    if points.len() <= m {
        return points.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, points.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Trains the encoder on `warehouse` and returns the kernel statistics and
/// per-epoch mean loss. `stats` overrides the estimate when given.
pub fn train_stage1(
    encoder: &mut PartEncoder,
    warehouse: &[&Part],
    cfg: &TrainConfig,
    stats: Option<DistanceStats>,
) -> Result<Stage1Report> {
    cfg.validate()?;
    let labels: Vec<u16> = warehouse.iter().map(|p| p.part_label).collect();
    let clouds: Vec<&[Point]> = warehouse.iter().map(|p| p.cloud.points()).collect();
    let stats = match stats {
        Some(s) => {
            s.validate()?;
            s
        }
        None => estimate_distance_stats(&clouds, &labels, cfg.stats_subset, cfg.seed, cfg.chamfer())?,
    };
    let schedule = cfg.steepness();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_4531);
    let mut sampler = BalancedSampler::new(&labels, &mut rng);
    let steps_per_epoch = warehouse.len().div_ceil(cfg.stage1_batch);
    let total = steps_per_epoch * cfg.stage1_epochs;
    let warmup = (total as f64 * cfg.warmup_fraction).round() as usize;
    let mut adam = Adam::new(&encoder.params, cfg.adam);
    let mut epochs = Vec::with_capacity(cfg.stage1_epochs);
    let mut step = 0;
    for epoch in 0..cfg.stage1_epochs {
        let k = steepness_at(epoch, &schedule)?;
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sampler.batch(cfg.stage1_batch, &mut rng);
            let pts: Vec<Vec<Point>> = batch
                .iter()
                .map(|&i| subsample(clouds[i], cfg.train_points, &mut rng))
                .collect();
            let refs: Vec<&[Point]> = pts.iter().map(|p| p.as_slice()).collect();
            let (x, mask) = pad_batch(&refs)?;
            let bl: Vec<u16> = batch.iter().map(|&i| labels[i]).collect();
            let bc: Vec<&[Point]> = batch.iter().map(|&i| clouds[i]).collect();
            let target = build_target_matrix(&bc, &bl, k, &stats, cfg.chamfer())?;
            let mut tape = Tape::new();
            let loss = encoder
                .forward(&mut tape, x, &mask)
                .and_then(|f| similarity_loss(&mut tape, f, &target))
                .map_err(diverged(epoch))?;
            sum += tape.value(loss).item()?;
            let grads = tape.backward(loss).map_err(diverged(epoch))?;
            let lr = lr_schedule(step, total, warmup, cfg.lr_peak, cfg.lr_min);
            adam.step(&mut encoder.params, &grads, lr).map_err(diverged(epoch))?;
            step += 1;
        }
        let loss = sum / steps_per_epoch as f64;
        log::info!("stage 1 epoch {epoch}: k = {k:.2}, loss = {loss:.5}");
        epochs.push(Stage1Epoch { epoch, k, loss });
    }
    Ok(Stage1Report { stats, epochs })
}

/// Encodes every part of `items` with the frozen encoder.
pub fn encode_items(encoder: &EncoderSnapshot, items: &[&ObjectAssembly]) -> Result<HashMap<u64, FeatureVec>> {
    let parts: Vec<&Part> = items.iter().flat_map(|o| o.parts.iter()).collect();
    let feats = parts
        .par_iter()
        .map(|p| encoder.encode(&p.cloud).map_err(|e| e.for_part(p.part_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().map(|p| p.part_id).zip(feats).collect())
}

/// Token sequence of an object's parts, in the given order.
pub fn object_tokens(parts: &[&Part], features: &HashMap<u64, FeatureVec>) -> Result<TokenSequence> {
    let mut pairs = Vec::with_capacity(parts.len());
    for p in parts {
        let f = features.get(&p.part_id).ok_or(Error::UnknownPart(p.part_id))?;
        pairs.push((f.as_slice(), p.pose.centroid));
    }
    assemble_tokens(pairs)
}

/// Index of the part to remove, if the augmentation fires for an object of
/// `n` parts.
pub fn dropout_choice(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Option<usize> {
    if n >= 3 && rng.random_bool(p) {
        Some(rng.random_range(0..n))
    } else {
        None
    }
}

/// Trains the classifier on `items` with features from the frozen encoder.
pub fn train_stage2(
    encoder: &EncoderSnapshot,
    relnet: &mut RelNet,
    items: &[&ObjectAssembly],
    cfg: &TrainConfig,
) -> Result<Stage2Report> {
    cfg.validate()?;
    let k = relnet.config.classes;
    let mut counts = vec![0usize; k];
    for o in items {
        let c = o.object_class as usize;
        if c >= k {
            return Err(Error::Config(format!("object class {c} outside {k} classes")));
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no training objects")));
    }
    if encoder.d() != relnet.config.d {
        return Err(Error::Config(format!(
            "encoder width {} does not match relation network d = {}",
            encoder.d(),
            relnet.config.d
        )));
    }
    let features = encode_items(encoder, items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_4532);
    let steps_per_epoch = items.len().div_ceil(cfg.stage2_batch);
    let total = steps_per_epoch * cfg.stage2_epochs;
    let warmup = (total as f64 * cfg.warmup_fraction).round() as usize;
    let mut adam = Adam::new(&relnet.params, cfg.adam);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.stage2_epochs);
    let mut step = 0;
    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.stage2_batch) {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let o = items[i];
                let mut parts: Vec<&Part> = o.parts.iter().collect();
                if let Some(drop) = dropout_choice(parts.len(), cfg.part_dropout, &mut rng) {
                    parts.remove(drop);
                }
                seqs.push(object_tokens(&parts, &features)?);
                targets.push(o.object_class as usize);
            }
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let mut tape = Tape::new();
            let logits = relnet.logits(&mut tape, &refs).map_err(diverged(epoch))?;
            for (r, &t) in targets.iter().enumerate() {
                let row = tape.value(logits).row(r);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                correct += (best == t) as usize;
            }
            let loss = tape.cross_entropy(logits, &targets).map_err(diverged(epoch))?;
            sum += tape.value(loss).item()? * chunk.len() as f64;
            let grads = tape.backward(loss).map_err(diverged(epoch))?;
            let lr = lr_schedule(step, total, warmup, cfg.lr_peak, cfg.lr_min);
            adam.step(&mut relnet.params, &grads, lr).map_err(diverged(epoch))?;
            step += 1;
        }
        let loss = sum / items.len() as f64;
        let accuracy = correct as f64 / items.len() as f64;
        log::info!("stage 2 epoch {epoch}: loss = {loss:.5}, accuracy = {accuracy:.3}");
        epochs.push(Stage2Epoch { epoch, loss, accuracy });
    }
    Ok(Stage2Report { epochs })
}
