//! `f32` inference copy of the relation network.
//!
//! Every row is computed by the same kernels whether it comes from a full
//! sequence or from a cached context, so scoring a candidate against a cached
//! context gives exactly the logits of classifying the extended sequence.

use rayon::prelude::*;

use super::{centroid_embedding, Dense, Layout, Norm, RelNetConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, LAYER_NORM_EPS};

#[derive(Clone, Debug)]
struct DenseF32 {
    w: Vec<f32>,
    b: Vec<f32>,
    fan_out: usize,
}

impl DenseF32 {
    fn new(store: &ParamStore, d: Dense) -> Self {
        let w = store.get(d.w);
        DenseF32 {
            w: w.data().iter().map(|v| *v as f32).collect(),
            b: store.get(d.b).data().iter().map(|v| *v as f32).collect(),
            fan_out: w.shape()[1],
        }
    }

    /// Adds `x·W[offset..offset + x.len()]` to `out`, input by input.
    #[inline]
    fn accumulate(&self, x: &[f32], offset: usize, out: &mut [f32]) {
        let n = self.fan_out;
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[(offset + i) * n..(offset + i + 1) * n];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    #[inline]
    fn apply(&self, x: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.b);
        self.accumulate(x, 0, out);
    }
}

#[derive(Clone, Debug)]
struct NormF32 {
    g: Vec<f32>,
    b: Vec<f32>,
}

impl NormF32 {
    fn new(store: &ParamStore, n: Norm) -> Self {
        let conv = |id| store.get(id).data().iter().map(|v| *v as f32).collect();
        NormF32 {
            g: conv(n.g),
            b: conv(n.b),
        }
    }

    #[inline]
    fn apply(&self, x: &[f32], out: &mut [f32]) {
        let n = x.len() as f64;
        let mean = x.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = x.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for i in 0..x.len() {
            let xhat = ((x[i] as f64 - mean) * rstd) as f32;
            out[i] = xhat * self.g[i] + self.b[i];
        }
    }
}

#[derive(Clone, Debug)]
struct BlockF32 {
    ln1: NormF32,
    qkv: DenseF32,
    out: DenseF32,
    ln2: NormF32,
    ff1: DenseF32,
    ff2: DenseF32,
}

/// Inference-only relation network parameters.
#[derive(Clone, Debug)]
pub struct RelNetSnapshot {
    config: RelNetConfig,
    input: DenseF32,
    cls: Vec<f32>,
    blocks: Vec<BlockF32>,
    ln_f: NormF32,
    head0: DenseF32,
    head1: DenseF32,
}

/// A query object prepared for scoring many candidates in one slot.
#[derive(Clone, Debug)]
pub struct ContextCache {
    /// Model-width rows: classification token, then the context parts.
    rows: Vec<f32>,
    /// First-layer query/key/value rows for `rows`.
    qkv0: Vec<f32>,
    /// Projection of the slot's centroid code, before the candidate feature.
    slot_base: Vec<f32>,
}

impl ContextCache {
    pub fn part_count(&self, width: usize) -> usize {
        self.rows.len() / width - 1
    }
}

impl RelNetSnapshot {
    pub(super) fn from_params(config: &RelNetConfig, store: &ParamStore, layout: &Layout) -> Self {
        RelNetSnapshot {
            config: config.clone(),
            input: DenseF32::new(store, layout.input),
            cls: store.get(layout.cls).data().iter().map(|v| *v as f32).collect(),
            blocks: layout
                .blocks
                .iter()
                .map(|b| BlockF32 {
                    ln1: NormF32::new(store, b.ln1),
                    qkv: DenseF32::new(store, b.qkv),
                    out: DenseF32::new(store, b.out),
                    ln2: NormF32::new(store, b.ln2),
                    ff1: DenseF32::new(store, b.ff1),
                    ff2: DenseF32::new(store, b.ff2),
                })
                .collect(),
            ln_f: NormF32::new(store, layout.ln_f),
            head0: DenseF32::new(store, layout.head0),
            head1: DenseF32::new(store, layout.head1),
        }
    }

    pub fn config(&self) -> &RelNetConfig {
        &self.config
    }

    /// Projects a part token: bias, then the centroid code, then the feature.
    fn project(&self, feature: &[f32], code: &[f32], out: &mut [f32]) {
        self.slot_base(code, out);
        self.input.accumulate(feature, 0, out);
    }

    fn slot_base(&self, code: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.input.b);
        self.input.accumulate(code, self.config.d, out);
    }

    fn embed(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        if seq.width() != self.config.token_width() {
            return Err(Error::ShapeMismatch {
                op: "classify",
                detail: format!(
                    "token width {} for a model expecting {}",
                    seq.width(),
                    self.config.token_width()
                ),
            });
        }
        let w = self.config.model_width;
        let d = self.config.d;
        let mut rows = vec![0f32; seq.len() * w];
        rows[..w].copy_from_slice(&self.cls);
        for i in 0..seq.part_count() {
            let tok: Vec<f32> = seq.part_token(i).iter().map(|v| *v as f32).collect();
            self.project(&tok[..d], &tok[d..], &mut rows[(i + 1) * w..(i + 2) * w]);
        }
        Ok(rows)
    }

    fn qkv0_rows(&self, rows: &[f32]) -> Vec<f32> {
        let w = self.config.model_width;
        let blk = &self.blocks[0];
        let mut a = vec![0f32; w];
        let mut out = vec![0f32; rows.len() * 3];
        for (r, o) in rows.chunks_exact(w).zip(out.chunks_exact_mut(3 * w)) {
            blk.ln1.apply(r, &mut a);
            blk.qkv.apply(&a, o);
        }
        out
    }

    /// Runs the layers over `t` rows of width `W` and returns the logits.
    /// The first-layer q/k/v of the leading `cached.len() / 3W` rows are
    /// taken from `cached`.
    fn run(&self, mut x: Vec<f32>, t: usize, cached: &[f32]) -> Vec<f64> {
        let w = self.config.model_width;
        let heads = self.config.heads;
        let dh = w / heads;
        let inv = 1.0 / (dh as f32).sqrt();
        let n_blocks = self.blocks.len();
        let mut a = vec![0f32; w];
        let mut qkv = vec![0f32; t * 3 * w];
        let mut o = vec![0f32; w];
        let mut proj = vec![0f32; w];
        let mut scores = vec![0f32; t];
        let mut hidden = vec![0f32; self.config.ff_width];
        let mut attn = vec![0f32; t * w];
        for (l, blk) in self.blocks.iter().enumerate() {
            let from = if l == 0 { cached.len() / (3 * w) } else { 0 };
            if from > 0 {
                qkv[..cached.len()].copy_from_slice(cached);
            }
            for r in from..t {
                blk.ln1.apply(&x[r * w..(r + 1) * w], &mut a);
                blk.qkv.apply(&a, &mut qkv[r * 3 * w..(r + 1) * 3 * w]);
            }
            // Only the classification row feeds the head, so the last layer
            // updates that row alone.
            let live = if l + 1 == n_blocks { 1 } else { t };
            for i in 0..live {
                let q = &qkv[i * 3 * w..i * 3 * w + w];
                for h in 0..heads {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let mut m = f32::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &qkv[j * 3 * w + w + h * dh..j * 3 * w + w + (h + 1) * dh];
                        let dot: f32 = qh.iter().zip(k).map(|(a, b)| a * b).sum();
                        *s = dot * inv;
                        m = m.max(*s);
                    }
                    let mut z = 0f32;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let oh = &mut o[h * dh..(h + 1) * dh];
                    oh.fill(0.0);
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        let v = &qkv[j * 3 * w + 2 * w + h * dh..j * 3 * w + 2 * w + (h + 1) * dh];
                        for (acc, vv) in oh.iter_mut().zip(v) {
                            *acc += p * vv;
                        }
                    }
                }
                attn[i * w..(i + 1) * w].copy_from_slice(&o);
            }
            for i in 0..live {
                blk.out.apply(&attn[i * w..(i + 1) * w], &mut proj);
                let xi = &mut x[i * w..(i + 1) * w];
                for (xv, p) in xi.iter_mut().zip(&proj) {
                    *xv += p;
                }
                blk.ln2.apply(xi, &mut a);
                blk.ff1.apply(&a, &mut hidden);
                hidden.iter_mut().for_each(|v| *v = v.max(0.0));
                blk.ff2.apply(&hidden, &mut proj);
                for (xv, p) in xi.iter_mut().zip(&proj) {
                    *xv += p;
                }
            }
        }
        self.ln_f.apply(&x[..w], &mut a);
        let mut h = vec![0f32; self.config.head_hidden];
        self.head0.apply(&a, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut logits = vec![0f32; self.config.classes];
        self.head1.apply(&h, &mut logits);
        logits.iter().map(|v| *v as f64).collect()
    }

    /// Class logits of one object.
    pub fn classify(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let rows = self.embed(seq)?;
        Ok(self.run(rows, seq.len(), &[]))
    }

    /// Logits for several objects. Sequences are padded to a common length;
    /// padded rows are excluded from attention and never read.
    pub fn classify_batch(&self, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty classifier batch".into()));
        }
        let w = self.config.model_width;
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut padded = vec![0f32; seqs.len() * t_max * w];
        for (s, chunk) in seqs.iter().zip(padded.chunks_exact_mut(t_max * w)) {
            let rows = self.embed(s)?;
            chunk[..rows.len()].copy_from_slice(&rows);
        }
        Ok(seqs
            .par_iter()
            .enumerate()
            .map(|(b, s)| {
                let len = s.len();
                let rows = padded[b * t_max * w..(b * t_max + len) * w].to_vec();
                self.run(rows, len, &[])
            })
            .collect())
    }

    /// Prepares `context` for scoring candidates placed at `slot_centroid`.
    pub fn context(&self, context: &TokenSequence, slot_centroid: [f32; 3]) -> Result<ContextCache> {
        let rows = self.embed(context)?;
        let qkv0 = self.qkv0_rows(&rows);
        let code: Vec<f32> = centroid_embedding(slot_centroid).iter().map(|v| *v as f32).collect();
        let mut slot_base = vec![0f32; self.config.model_width];
        self.slot_base(&code, &mut slot_base);
        Ok(ContextCache { rows, qkv0, slot_base })
    }

    /// Logits of the context extended by one candidate token, which equals
    /// classifying that extended sequence.
    pub fn score_candidate(&self, ctx: &ContextCache, feature: &[f32]) -> Result<Vec<f64>> {
        if feature.len() != self.config.d {
            return Err(Error::ShapeMismatch {
                op: "score_candidate",
                detail: format!("feature width {} for d = {}", feature.len(), self.config.d),
            });
        }
        let w = self.config.model_width;
        let mut rows = Vec::with_capacity(ctx.rows.len() + w);
        rows.extend_from_slice(&ctx.rows);
        let mut cand = ctx.slot_base.clone();
        self.input.accumulate(feature, 0, &mut cand);
        rows.extend_from_slice(&cand);
        let t = rows.len() / w;
        Ok(self.run(rows, t, &ctx.qkv0))
    }
}
