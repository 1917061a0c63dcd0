//! Operation recording and reverse-mode differentiation.

use super::kernels::matmul;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
        mask: Vec<f64>,
    },
    ReduceMean {
        x: Var,
        weights: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SquaredError(Var, Var),
    Reshape(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that it can be differentiated once.
///
/// A tape is single-threaded; large kernels inside individual operations
/// still use the rayon pool.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a parameter, `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to any recorded value that requires one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("value {v:?} is not on this tape")));
        }
        Ok(())
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Op::Param(id), true, "param")
    }

    /// `[.., m, k] · [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let out = matmul(av.data(), false, bv.data(), false, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(&[a, b]);
        self.push(t, Op::MatMul(a, b), ng, "matmul")
    }

    /// `A · Bᵀ` for 2-D `A: [m, k]`, `B: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(mismatch(
                "matmul_nt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let out = matmul(av.data(), false, bv.data(), true, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[a, b]);
        self.push(t, Op::MatMulNt(a, b), ng, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    /// Adds a `[C]` (or `[1, C]`) bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(mismatch(
                "add_bias",
                format!("{:?} + bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(&[x, b]);
        self.push(t, Op::AddBias(x, b), ng, "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect())?;
        let ng = self.needs(&[x]);
        self.push(t, Op::Scale(x, s), ng, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        let ng = self.needs(&[x]);
        self.push(t, Op::Relu(x), ng, "relu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        self.push(t, Op::Softmax(x), ng, "softmax")
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(mismatch(
                "layer_norm",
                format!("{:?} with gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        for p in parts {
            self.check(*p)?;
        }
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows || v.shape()[..v.shape().len() - 1] != lead[..] {
                return Err(mismatch(
                    "concat",
                    format!("leading dims differ: {:?}", v.shape()),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let ng = self.needs(parts);
        self.push(t, Op::Concat(parts.to_vec()), ng, "concat")
    }

    /// Stacks 2-D inputs with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no inputs".into()));
        }
        for p in parts {
            self.check(*p)?;
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != c {
                return Err(mismatch(
                    "concat_rows",
                    format!("column count {} vs {c}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let ng = self.needs(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Columns `start..start + len` of a 2-D input.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(mismatch(
                "slice_cols",
                format!("{start}..{} of {c} columns", start + len),
            ));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let ng = self.needs(&[x]);
        self.push(t, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    fn set_reduce_dims(&self, x: Var, mask: &[f64], op: &'static str) -> Result<(usize, usize, usize)> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(mismatch(op, format!("expected [B, N, C], got {:?}", xv.shape())));
        }
        let (b, n, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if mask.len() != b * n {
            return Err(mismatch(op, format!("mask of {} for [{b}, {n}]", mask.len())));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidInput(format!("{op}: mask must be 0/1")));
        }
        Ok((b, n, c))
    }

    /// Max over the set axis of `[B, N, C]`, ignoring rows whose mask is 0.
    /// A set with every row masked is an error.
    pub fn reduce_max(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        self.check(x)?;
        let (b, n, c) = self.set_reduce_dims(x, mask, "reduce_max")?;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![usize::MAX; b * c];
        for bi in 0..b {
            if !(0..n).any(|i| mask[bi * n + i] != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "reduce_max: set {bi} is fully masked"
                )));
            }
            for i in 0..n {
                if mask[bi * n + i] == 0.0 {
                    continue;
                }
                let row = &xv[(bi * n + i) * c..(bi * n + i + 1) * c];
                for j in 0..c {
                    if row[j] > out[bi * c + j] {
                        out[bi * c + j] = row[j];
                        argmax[bi * c + j] = bi * n + i;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        let ng = self.needs(&[x]);
        self.push(
            t,
            Op::ReduceMax {
                x,
                argmax,
                mask: mask.to_vec(),
            },
            ng,
            "reduce_max",
        )
    }

    /// Mean over the set axis of `[B, N, C]`, ignoring rows whose mask is 0.
    pub fn reduce_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        self.check(x)?;
        let (b, n, c) = self.set_reduce_dims(x, mask, "reduce_mean")?;
        let xv = self.value(x).data();
        let mut weights = vec![0.0; b * n];
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let count: f64 = mask[bi * n..(bi + 1) * n].iter().sum();
            if count == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "reduce_mean: set {bi} is fully masked"
                )));
            }
            for i in 0..n {
                let w = mask[bi * n + i] / count;
                weights[bi * n + i] = w;
                if w == 0.0 {
                    continue;
                }
                let row = &xv[(bi * n + i) * c..(bi * n + i + 1) * c];
                for j in 0..c {
                    out[bi * c + j] += w * row[j];
                }
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        let ng = self.needs(&[x]);
        self.push(t, Op::ReduceMean { x, weights }, ng, "reduce_mean")
    }

    /// Rows `idx` of a 2-D input, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(mismatch(
                "gather_rows",
                format!("row {bad} of {}", xv.rows()),
            ));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        let ng = self.needs(&[x]);
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    /// Mean of `(a - b)²` over all elements.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(mismatch(
                "squared_error",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = av.numel().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::SquaredError(a, b), ng, "squared_error")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(&[x]);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite("normalize_rows of a zero row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        self.push(t, Op::NormalizeRows { x, norms }, ng, "normalize_rows")
    }

    /// Mean negative log-likelihood of `targets` under softmax of `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let k = lv.cols();
        if lv.rows() != targets.len() || targets.iter().any(|&t| t >= k) {
            return Err(mismatch(
                "cross_entropy",
                format!("{:?} logits for {} targets", lv.shape(), targets.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            softmax_in_place(row);
        }
        let b = targets.len().max(1) as f64;
        let ng = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss / b),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    /// Smallest distance of any recorded input from a non-differentiable
    /// point: ReLU inputs from 0 and max-pool winners from the runner-up.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::ReduceMax { x, argmax, mask } => {
                    let xv = self.value(*x);
                    let (n, c) = (xv.shape()[1], xv.shape()[2]);
                    for (o, &src) in argmax.iter().enumerate() {
                        let (bi, j) = (o / c, o % c);
                        let best = xv.data()[src * c + j];
                        for i in 0..n {
                            let row = bi * n + i;
                            if row != src && mask[row] != 0.0 {
                                margin = margin.min((best - xv.data()[row * c + j]).abs());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar loss. A tape may be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward op".into()));
        }
        self.check(loss)?;
        if self.consumed {
            return Err(Error::Usage("tape already differentiated".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut params: Vec<Option<Tensor>> = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if params.len() <= pid.0 {
                    params.resize_with(pid.0 + 1, || None);
                }
                if let Some(g) = &grads[id] {
                    match &mut params[pid.0] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let da = matmul(gd, false, bv.data(), true, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = matmul(av.data(), true, gd, false, k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.nodes[a.0].needs_grad {
                    let da = matmul(gd, false, bv.data(), false, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = matmul(gd, true, av.data(), false, n, m, k);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gd);
                if self.nodes[b.0].needs_grad {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = gd.iter().map(|v| v * s).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xv)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = g.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let gam = self.value(*gamma).data();
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, &dg);
                    self.accumulate(grads, *beta, &db);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dxr[j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + off..r * total + off + pc]);
                        }
                        self.accumulate(grads, *p, &dp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, c) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ReduceMax { x, argmax, .. } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src * c + o % c] += gd[o];
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ReduceMean { x, weights } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![0.0; xv.numel()];
                for (row, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let bi = row / n;
                    for j in 0..c {
                        dx[row * c + j] = w * gd[bi * c + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (l, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += gd[l * c + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * gd[0] / av.len().max(1) as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &db);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd),
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = g.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, ((dxr, yr), gr)) in dx
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(gd.chunks(c))
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = gd[0] / targets.len().max(1) as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * k + t] -= scale;
                }
                self.accumulate(grads, *logits, &dl);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(d)
                .for_each(|(a, b)| *a += b),
            slot => {
                *slot = Some(
                    Tensor::new(self.nodes[v.0].value.shape().to_vec(), d.to_vec())
                        .expect("gradient matches value shape"),
                )
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
