//! Relation network: a shallow pre-norm transformer over part tokens with a
//! learned classification token, read out as K class logits.
//!
//! A part token is the part feature concatenated with a sinusoidal code of
//! the part centroid in the object frame. Tokens are projected to the model
//! width before the first layer. There is no positional encoding, so the
//! logits do not depend on part order.

mod snapshot;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ParamId, ParamStore, Tape, Tensor, Var};

pub use snapshot::{ContextCache, RelNetSnapshot};

/// Width of the centroid code: sin and cos at three frequencies per axis.
pub const CENTROID_DIM: usize = 18;
const FREQUENCIES: [f64; 3] = [
    std::f64::consts::PI,
    2.0 * std::f64::consts::PI,
    4.0 * std::f64::consts::PI,
];

/// Parameter-free code of a centroid: for each axis and frequency `f`,
/// `sin(f·c)` then `cos(f·c)`.
pub fn centroid_embedding(c: [f32; 3]) -> [f64; CENTROID_DIM] {
    let mut out = [0.0; CENTROID_DIM];
    let mut i = 0;
    for v in c {
        for f in FREQUENCIES {
            let (s, co) = (f * v as f64).sin_cos();
            out[i] = s;
            out[i + 1] = co;
            i += 2;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelNetConfig {
    /// Part feature width; must match the encoder.
    pub d: usize,
    pub model_width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub head_hidden: usize,
    pub classes: usize,
}

impl Default for RelNetConfig {
    fn default() -> Self {
        RelNetConfig {
            d: 64,
            model_width: 64,
            heads: 4,
            layers: 2,
            ff_width: 128,
            head_hidden: 64,
            classes: 3,
        }
    }
}

impl RelNetConfig {
    pub fn token_width(&self) -> usize {
        self.d + CENTROID_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.model_width, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.layers == 0 || self.d == 0 || self.ff_width == 0 || self.head_hidden == 0 {
            return Err(Error::Config("relation network sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One object as the classifier sees it: part tokens in any order. The
/// classification token is implicit and always comes first.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    width: usize,
    parts: Vec<f64>,
}

impl TokenSequence {
    /// Sequence length including the classification token.
    pub fn len(&self) -> usize {
        self.parts.len() / self.width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn part_count(&self) -> usize {
        self.parts.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn part_token(&self, i: usize) -> &[f64] {
        &self.parts[i * self.width..(i + 1) * self.width]
    }

    /// Appends one more part token.
    pub fn push(&mut self, feature: &[f32], centroid: [f32; 3]) -> Result<()> {
        if feature.len() + CENTROID_DIM != self.width {
            return Err(Error::ShapeMismatch {
                op: "assemble_tokens",
                detail: format!("feature width {} in a {}-wide sequence", feature.len(), self.width),
            });
        }
        check_unit(feature)?;
        if centroid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("part centroid".into()));
        }
        self.parts.extend(feature.iter().map(|v| *v as f64));
        self.parts.extend(centroid_embedding(centroid));
        Ok(())
    }

    /// Copy with part tokens reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> TokenSequence {
        let mut parts = Vec::with_capacity(self.parts.len());
        for &i in perm {
            parts.extend_from_slice(self.part_token(i));
        }
        TokenSequence {
            width: self.width,
            parts,
        }
    }
}

fn check_unit(f: &[f32]) -> Result<()> {
    let n = f.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-5 {
        return Err(Error::Contract(format!("part feature has norm {n}, expected 1")));
    }
    Ok(())
}

/// Builds a token sequence from `(feature, centroid)` pairs. Rejects an
/// empty part list.
pub fn assemble_tokens<'a>(parts: impl IntoIterator<Item = (&'a [f32], [f32; 3])>) -> Result<TokenSequence> {
    let mut seq: Option<TokenSequence> = None;
    for (f, c) in parts {
        let s = seq.get_or_insert_with(|| TokenSequence {
            width: f.len() + CENTROID_DIM,
            parts: Vec::new(),
        });
        s.push(f, c)?;
    }
    seq.ok_or_else(|| Error::InvalidInput("object has no parts".into()))
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    qkv: Dense,
    out: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Dense,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head0: Dense,
    head1: Dense,
}

/// Trainable relation network.
pub struct RelNet {
    pub config: RelNetConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Creates parameters when given an RNG, otherwise looks them up in the
/// store and checks their shapes.
struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        if let Some(r) = self.rng.as_deref_mut() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(r)).collect()
                }
            };
            return Ok(self.store.add(name, Tensor::new(shape, data)?));
        }
        let id = self
            .store
            .find(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
        if self.store.get(id).shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "{name} has shape {:?}, config expects {shape:?}",
                self.store.get(id).shape()
            )));
        }
        Ok(id)
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.tensor(format!("{name}.w"), vec![fin, fout], Init::Normal((1.0 / fin as f64).sqrt()))?,
            b: self.tensor(format!("{name}.b"), vec![fout], Init::Zero)?,
        })
    }

    fn norm(&mut self, name: &str, width: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.tensor(format!("{name}.g"), vec![width], Init::One)?,
            b: self.tensor(format!("{name}.b"), vec![width], Init::Zero)?,
        })
    }

    fn layout(&mut self, config: &RelNetConfig) -> Result<Layout> {
        let w = config.model_width;
        let input = self.dense("rel.input", config.token_width(), w)?;
        let cls = self.tensor("rel.cls".into(), vec![1, w], Init::Normal(0.02))?;
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            blocks.push(Block {
                ln1: self.norm(&format!("rel.block{l}.ln1"), w)?,
                qkv: self.dense(&format!("rel.block{l}.qkv"), w, 3 * w)?,
                out: self.dense(&format!("rel.block{l}.out"), w, w)?,
                ln2: self.norm(&format!("rel.block{l}.ln2"), w)?,
                ff1: self.dense(&format!("rel.block{l}.ff1"), w, config.ff_width)?,
                ff2: self.dense(&format!("rel.block{l}.ff2"), config.ff_width, w)?,
            });
        }
        Ok(Layout {
            input,
            cls,
            blocks,
            ln_f: self.norm("rel.ln_f", w)?,
            head0: self.dense("rel.head0", w, config.head_hidden)?,
            head1: self.dense("rel.head1", config.head_hidden, config.classes)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    Normal(f64),
}

impl RelNet {
    pub fn new(config: RelNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Builder {
            store: &mut params,
            rng: Some(&mut rng),
        }
        .layout(&config)?;
        Ok(RelNet {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: RelNetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut params = params;
        let layout = Builder {
            store: &mut params,
            rng: None,
        }
        .layout(&config)?;
        Ok(RelNet {
            config,
            params,
            layout,
        })
    }

    /// Records the classifier on `tape` for a batch of sequences and returns
    /// logits `[B, K]`.
    pub fn logits(&self, tape: &mut Tape, seqs: &[&TokenSequence]) -> Result<Var> {
        self.logits_with(tape, &self.params, seqs)
    }

    /// [`RelNet::logits`] reading parameters from `store`.
    ///
    /// Sequences are stacked row-wise; row-local maps run on the whole stack
    /// and attention runs per sequence, so no padding is involved.
    pub fn logits_with(&self, tape: &mut Tape, store: &ParamStore, seqs: &[&TokenSequence]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty classifier batch".into()));
        }
        let tw = self.config.token_width();
        let w = self.config.model_width;
        let mut rows = Vec::new();
        let mut gather = Vec::new();
        let mut spans = Vec::new();
        for s in seqs {
            if s.width() != tw {
                return Err(Error::ShapeMismatch {
                    op: "classify",
                    detail: format!("token width {} for a model expecting {tw}", s.width()),
                });
            }
            let start = gather.len();
            gather.push(0);
            for i in 0..s.part_count() {
                gather.push(1 + rows.len() / tw);
                rows.extend_from_slice(s.part_token(i));
            }
            spans.push((start, s.len()));
        }
        let n_parts = rows.len() / tw;
        let x = tape.constant(Tensor::new(vec![n_parts, tw], rows)?)?;
        let p = affine(tape, store, x, self.layout.input)?;
        let cls = tape.param(store, self.layout.cls)?;
        let all = tape.concat_rows(&[cls, p])?;
        let mut h = tape.gather_rows(all, &gather)?;

        let heads = self.config.heads;
        let dh = w / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        for block in &self.layout.blocks {
            let a = norm(tape, store, h, block.ln1)?;
            let qkv = affine(tape, store, a, block.qkv)?;
            let mut outs = Vec::with_capacity(spans.len());
            for &(start, len) in &spans {
                let idx: Vec<usize> = (start..start + len).collect();
                let s = tape.gather_rows(qkv, &idx)?;
                let mut per_head = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let q = tape.slice_cols(s, hd * dh, dh)?;
                    let k = tape.slice_cols(s, w + hd * dh, dh)?;
                    let v = tape.slice_cols(s, 2 * w + hd * dh, dh)?;
                    let scores = tape.matmul_nt(q, k)?;
                    let scores = tape.scale(scores, inv)?;
                    let attn = tape.softmax(scores)?;
                    per_head.push(tape.matmul(attn, v)?);
                }
                outs.push(tape.concat(&per_head)?);
            }
            let o = tape.concat_rows(&outs)?;
            let o = affine(tape, store, o, block.out)?;
            h = tape.add(h, o)?;
            let f = norm(tape, store, h, block.ln2)?;
            let f = affine(tape, store, f, block.ff1)?;
            let f = tape.relu(f)?;
            let f = affine(tape, store, f, block.ff2)?;
            h = tape.add(h, f)?;
        }
        let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let c = tape.gather_rows(h, &starts)?;
        let c = norm(tape, store, c, self.layout.ln_f)?;
        let c = affine(tape, store, c, self.layout.head0)?;
        let c = tape.relu(c)?;
        affine(tape, store, c, self.layout.head1)
    }

    /// Frozen `f32` copy for inference.
    pub fn snapshot(&self) -> RelNetSnapshot {
        RelNetSnapshot::from_params(&self.config, &self.params, &self.layout)
    }
}

fn affine(tape: &mut Tape, store: &ParamStore, x: Var, d: Dense) -> Result<Var> {
    let w = tape.param(store, d.w)?;
    let b = tape.param(store, d.b)?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, n: Norm) -> Result<Var> {
    let g = tape.param(store, n.g)?;
    let b = tape.param(store, n.b)?;
    tape.layer_norm(x, g, b)
}

/// Log-softmax of one logit row, in `f64`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}
