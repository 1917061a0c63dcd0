//! Point-set encoder: a shared per-point perceptron, masked max pooling over
//! points, a small head and L2 normalization.
//!
//! Training runs on the `f64` tape. Inference uses an `f32` snapshot whose
//! per-point arithmetic never mixes points, so pooling is exactly
//! order-independent and padding has no effect.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::gradcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Unit-norm part embedding.
pub type FeatureVec = Vec<f32>;

/// Tolerances of the normalized-input contract.
pub const CENTROID_TOL: f64 = 1e-3;
pub const SCALE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub d: usize,
    /// Scales every hidden width.
    pub width_multiplier: f64,
    /// Extra per-point layers appended at the last per-point width.
    pub extra_point_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            point_widths: vec![64, 128, 256],
            head_widths: vec![128],
            d: 64,
            width_multiplier: 1.0,
            extra_point_layers: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 8 {
            return Err(Error::Config(format!("feature width d must be ≥ 8, got {}", self.d)));
        }
        if self.point_widths.is_empty() {
            return Err(Error::Config("encoder needs at least one per-point layer".into()));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.widths().0.iter().chain(&self.widths().1).any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Effective (per-point, head) hidden widths after multipliers.
    pub fn widths(&self) -> (Vec<usize>, Vec<usize>) {
        let scale = |w: &usize| ((*w as f64 * self.width_multiplier).round() as usize).max(1);
        let mut point: Vec<usize> = self.point_widths.iter().map(scale).collect();
        if let Some(&last) = point.last() {
            point.extend(std::iter::repeat_n(last, self.extra_point_layers));
        }
        let head = self.head_widths.iter().map(scale).collect();
        (point, head)
    }
}

struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Trainable encoder parameters.
pub struct PartEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    point: Vec<Layer>,
    head: Vec<Layer>,
}

fn he_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Layer {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Layer {
        w: store.add(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).unwrap()),
        b: store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
    }
}

impl PartEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (pw, hw) = config.widths();
        let mut fan_in = 3;
        let mut point = Vec::new();
        for (i, &w) in pw.iter().enumerate() {
            point.push(he_init(&mut params, &format!("enc.point{i}"), fan_in, w, &mut rng));
            fan_in = w;
        }
        let mut head = Vec::new();
        for (i, &w) in hw.iter().chain(std::iter::once(&config.d)).enumerate() {
            head.push(he_init(&mut params, &format!("enc.head{i}"), fan_in, w, &mut rng));
            fan_in = w;
        }
        Ok(PartEncoder {
            config,
            params,
            point,
            head,
        })
    }

    /// Rebinds a stored parameter set (e.g. from a checkpoint) to its layers.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (pw, hw) = config.widths();
        let mut fan_in = 3;
        let bind = |name: String, fin: usize, fout: usize| -> Result<Layer> {
            let get = |suffix: &str, shape: Vec<usize>| -> Result<ParamId> {
                let key = format!("{name}.{suffix}");
                let id = params
                    .find(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {key}")))?;
                if params.get(id).shape() != shape.as_slice() {
                    return Err(Error::Config(format!(
                        "{key} has shape {:?}, config expects {shape:?}",
                        params.get(id).shape()
                    )));
                }
                Ok(id)
            };
            Ok(Layer {
                w: get("w", vec![fin, fout])?,
                b: get("b", vec![fout])?,
            })
        };
        let mut point = Vec::new();
        for (i, &w) in pw.iter().enumerate() {
            point.push(bind(format!("enc.point{i}"), fan_in, w)?);
            fan_in = w;
        }
        let mut head = Vec::new();
        for (i, &w) in hw.iter().chain(std::iter::once(&config.d)).enumerate() {
            head.push(bind(format!("enc.head{i}"), fan_in, w)?);
            fan_in = w;
        }
        Ok(PartEncoder {
            config,
            params,
            point,
            head,
        })
    }

    /// Records the encoder on `tape` for a padded batch `[B, P, 3]` with a
    /// `[B, P]` 0/1 mask; returns unit features `[B, d]`.
    pub fn forward(&self, tape: &mut Tape, points: Tensor, mask: &[f64]) -> Result<Var> {
        self.forward_with(tape, &self.params, points, mask)
    }

    /// [`PartEncoder::forward`] reading parameter values from `store`, which
    /// must share this encoder's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, points: Tensor, mask: &[f64]) -> Result<Var> {
        let shape = points.shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::ShapeMismatch {
                op: "encoder",
                detail: format!("expected [B, P, 3], got {shape:?}"),
            });
        }
        let (b, p) = (shape[0], shape[1]);
        let x = tape.constant(points.reshaped(vec![b * p, 3])?)?;
        let mut h = x;
        for layer in &self.point {
            h = dense(tape, store, h, layer)?;
            h = tape.relu(h)?;
        }
        let c = tape.value(h).cols();
        let h3 = tape.reshape(h, vec![b, p, c])?;
        let mut g = tape.reduce_max(h3, mask)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            g = dense(tape, store, g, layer)?;
            if i < last {
                g = tape.relu(g)?;
            }
        }
        tape.normalize_rows(g)
    }

    /// Frozen `f32` copy for inference.
    pub fn snapshot(&self) -> EncoderSnapshot {
        let conv = |l: &Layer| DenseF32::from_params(&self.params, l);
        EncoderSnapshot {
            point: self.point.iter().map(conv).collect(),
            head: self.head.iter().map(conv).collect(),
            d: self.config.d,
            hash: self.params.digest(),
        }
    }
}

fn dense(tape: &mut Tape, store: &ParamStore, x: Var, layer: &Layer) -> Result<Var> {
    let w = tape.param(store, layer.w)?;
    let b = tape.param(store, layer.b)?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Packs clouds into a padded `[B, P, 3]` tensor and its mask.
pub fn pad_batch(clouds: &[&[Point]]) -> Result<(Tensor, Vec<f64>)> {
    let p = clouds.iter().map(|c| c.len()).max().unwrap_or(0);
    if clouds.is_empty() || p == 0 {
        return Err(Error::InvalidInput("empty encoder batch".into()));
    }
    let mut data = vec![0.0; clouds.len() * p * 3];
    let mut mask = vec![0.0; clouds.len() * p];
    for (bi, c) in clouds.iter().enumerate() {
        for (i, pt) in c.iter().enumerate() {
            let row = bi * p + i;
            mask[row] = 1.0;
            for a in 0..3 {
                data[row * 3 + a] = pt[a] as f64;
            }
        }
    }
    Ok((Tensor::new(vec![clouds.len(), p, 3], data)?, mask))
}

#[derive(Clone, Debug)]
struct DenseF32 {
    w: Vec<f32>,
    b: Vec<f32>,
    fan_out: usize,
}

impl DenseF32 {
    fn from_params(store: &ParamStore, l: &Layer) -> Self {
        let w = store.get(l.w);
        DenseF32 {
            w: w.data().iter().map(|v| *v as f32).collect(),
            b: store.get(l.b).data().iter().map(|v| *v as f32).collect(),
            fan_out: w.shape()[1],
        }
    }

    /// `out = b + x·W` for one row, accumulated input by input.
    #[inline]
    fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        out.clear();
        out.extend_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Inference-only encoder parameters in `f32`.
#[derive(Clone, Debug)]
pub struct EncoderSnapshot {
    point: Vec<DenseF32>,
    head: Vec<DenseF32>,
    d: usize,
    hash: String,
}

impl EncoderSnapshot {
    pub fn d(&self) -> usize {
        self.d
    }

    /// Digest of the parameters this snapshot was taken from.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Encodes a normalized part cloud.
    pub fn encode(&self, cloud: &PointCloud) -> Result<FeatureVec> {
        check_normalized(cloud)?;
        Ok(self.encode_unchecked(cloud.points()))
    }

    /// Encodes several parts. Clouds are padded to a common length and padded
    /// rows masked out of the pooling.
    pub fn encode_batch(&self, clouds: &[&PointCloud]) -> Result<Vec<FeatureVec>> {
        if clouds.is_empty() {
            return Err(Error::InvalidInput("empty encoder batch".into()));
        }
        for c in clouds {
            check_normalized(c)?;
        }
        let p = clouds.iter().map(|c| c.len()).max().unwrap();
        let mut padded = vec![[0f32; 3]; clouds.len() * p];
        let mut mask = vec![false; clouds.len() * p];
        for (bi, c) in clouds.iter().enumerate() {
            padded[bi * p..bi * p + c.len()].copy_from_slice(c.points());
            mask[bi * p..bi * p + c.len()].fill(true);
        }
        Ok((0..clouds.len())
            .into_par_iter()
            .map(|bi| self.pool_and_head(&padded[bi * p..(bi + 1) * p], &mask[bi * p..(bi + 1) * p]))
            .collect())
    }

    /// Encodes without the normalization contract check.
    pub fn encode_unchecked(&self, points: &[Point]) -> FeatureVec {
        let mask = vec![true; points.len()];
        self.pool_and_head(points, &mask)
    }

    fn pool_and_head(&self, points: &[Point], mask: &[bool]) -> FeatureVec {
        let width = self.point.last().map_or(3, |l| l.fan_out);
        let mut pooled = vec![f32::NEG_INFINITY; width];
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (pt, _) in points.iter().zip(mask).filter(|(_, m)| **m) {
            a.clear();
            a.extend_from_slice(pt);
            for layer in &self.point {
                layer.apply(&a, &mut b);
                b.iter_mut().for_each(|v| *v = v.max(0.0));
                std::mem::swap(&mut a, &mut b);
            }
            for (p, v) in pooled.iter_mut().zip(&a) {
                if *v > *p {
                    *p = *v;
                }
            }
        }
        let mut h = pooled;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            layer.apply(&h, &mut b);
            if i < last {
                b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut h, &mut b);
        }
        let norm = h.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            h.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        h
    }
}

/// Checks the normalized-input contract.
pub fn check_normalized(cloud: &PointCloud) -> Result<()> {
    let c = cloud.centroid();
    let cn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    let mn = cloud.max_norm();
    if cn > CENTROID_TOL || (mn - 1.0).abs() > SCALE_TOL {
        return Err(Error::Contract(format!(
            "encoder input must be normalized: centroid norm {cn:.2e}, max norm {mn:.6}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_part;
    use rand::Rng;

    fn random_part(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.1..0.1),
                ]
            })
            .collect();
        normalize_part(&PointCloud::new(pts).unwrap()).unwrap().0
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            point_widths: vec![16, 32],
            head_widths: vec![16],
            d: 8,
            ..Default::default()
        }
    }

    #[test]
    fn unit_norm_and_exact_permutation_invariance() {
        let enc = PartEncoder::new(EncoderConfig::default(), 1).unwrap().snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let part = random_part(&mut rng, 300);
            let f = enc.encode(&part).unwrap();
            let n: f64 = f.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            let mut pts = part.points().to_vec();
            pts.reverse();
            pts.swap(0, 7);
            assert_eq!(enc.encode(&PointCloud::new(pts).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn batch_matches_solo_encoding() {
        let enc = PartEncoder::new(EncoderConfig::default(), 2).unwrap().snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_part(&mut rng, 8);
        let b = random_part(&mut rng, 500);
        let batch = enc.encode_batch(&[&a, &b, &a]).unwrap();
        assert_eq!(batch[0], enc.encode(&a).unwrap());
        assert_eq!(batch[1], enc.encode(&b).unwrap());
        assert_eq!(batch[2], batch[0]);
    }

    #[test]
    fn rejects_unnormalized_input() {
        let enc = PartEncoder::new(small(), 0).unwrap().snapshot();
        let cloud = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(enc.encode(&cloud), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_forward_matches_snapshot() {
        let enc = PartEncoder::new(small(), 3).unwrap();
        let snap = enc.snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_part(&mut rng, 20);
        let b = random_part(&mut rng, 13);
        let (x, mask) = pad_batch(&[a.points(), b.points()]).unwrap();
        let mut tape = Tape::new();
        let f = enc.forward(&mut tape, x, &mask).unwrap();
        for (i, c) in [&a, &b].iter().enumerate() {
            let want = snap.encode(c).unwrap();
            for (g, w) in tape.value(f).row(i).iter().zip(&want) {
                assert!((g - *w as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn params_round_trip_through_store() {
        let enc = PartEncoder::new(small(), 9).unwrap();
        let again = PartEncoder::from_params(small(), enc.params.clone()).unwrap();
        assert_eq!(again.snapshot().hash(), enc.snapshot().hash());
        let mut cfg = small();
        cfg.d = 16;
        assert!(PartEncoder::from_params(cfg, enc.params.clone()).is_err());
        assert!(EncoderConfig { d: 4, ..small() }.validate().is_err());
    }
}
