//! Central finite-difference oracle for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Inputs closer than this to a ReLU/max kink are resampled by the callers.
const KINK_GUARD: f64 = 1e-3;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Worst norm-wise relative error over all inputs.
    pub max_rel_error: f64,
    /// Smallest distance from a non-differentiable point seen in the graph.
    pub kink_margin: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives one variable per input tensor and must return a scalar.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let f0 = tape.value(loss).item()?;
    let kink_margin = tape.kink_margin();
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = probe
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let l = f(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error_floor(&analytic, &numeric, roundoff_floor(f0, numeric.len())));
    }
    Ok(FdReport {
        max_rel_error: worst,
        kink_margin,
    })
}

/// Like [`fd_check`] but differentiates with respect to every entry of a
/// parameter store, which `f` reads through [`Tape::param`].
///
/// At most `max_coords` coordinates per parameter are probed, evenly strided.
pub fn fd_check_params<F>(store: &ParamStore, max_coords: usize, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let f0 = tape.value(loss).item()?;
    let kink_margin = tape.kink_margin();
    let grads = tape.backward(loss)?;
    let eval = |probe: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, probe)?;
        t.value(l).item()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|i| i * n / max_coords).collect()
        };
        let full = grads
            .param(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let analytic: Vec<f64> = coords.iter().map(|&j| full[j]).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let x0 = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error_floor(&analytic, &numeric, roundoff_floor(f0, numeric.len())));
    }
    Ok(FdReport {
        max_rel_error: worst,
        kink_margin,
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with an absolute floor for near-zero gradients.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    relative_error_floor(a, b, 1e-7)
}

pub fn relative_error_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b)).max(floor).max(1e-7);
    norm(&diff) / scale
}

/// Gradient norm below which central differences of a loss near `f0` over
/// `n` coordinates are dominated by rounding (each difference carries about
/// `ε·|f0|/h` of noise); such gradients are compared absolutely.
pub fn roundoff_floor(f0: f64, n: usize) -> f64 {
    1e4 * f64::EPSILON * f0.abs().max(1.0) * (n as f64).sqrt() / FD_STEP
}

/// Runs `trial` on fresh seeds until its graph stays clear of kinks.
pub fn kink_free<F>(seed: u64, trial: F) -> Result<FdReport>
where
    F: Fn(&mut ChaCha8Rng) -> Result<FdReport>,
{
    kink_free_with(seed, KINK_GUARD, trial)
}

/// [`kink_free`] with an explicit margin.
pub fn kink_free_with<F>(seed: u64, guard: f64, trial: F) -> Result<FdReport>
where
    F: Fn(&mut ChaCha8Rng) -> Result<FdReport>,
{
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt));
        let report = trial(&mut rng)?;
        if report.kink_margin > guard {
            return Ok(report);
        }
    }
    Err(Error::Usage(format!(
        "seed {seed}: no kink-free sample in 64 attempts"
    )))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Random 0/1 mask over `[b, n]` with at least one live row per set.
pub fn random_mask(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..b * n)
        .map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 })
        .collect();
    for bi in 0..b {
        let keep = rng.random_range(0..n);
        m[bi * n + keep] = 1.0;
    }
    m
}

/// Names of the single-primitive checks run by [`primitive_trial`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "scale",
    "relu",
    "softmax",
    "layer_norm",
    "concat",
    "concat_rows",
    "slice_cols",
    "reduce_max",
    "reduce_mean",
    "gather_rows",
    "squared_error",
    "reshape",
    "normalize_rows",
    "cross_entropy",
];

/// Checks one primitive, wrapped so that its output reaches a scalar through
/// a fixed random projection (a plain sum would hide some adjoint errors).
pub fn primitive_trial(name: &str, seed: u64) -> Result<FdReport> {
    let name = name.to_string();
    kink_free(seed, move |rng| {
        let rows = rng.random_range(1..5);
        let cols = rng.random_range(2..6);
        let (inputs, build): (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>) =
            match name.as_str() {
                "matmul" => {
                    let k = rng.random_range(1..5);
                    (
                        vec![random_tensor(rng, vec![rows, k]), random_tensor(rng, vec![k, cols])],
                        Box::new(|t, v| t.matmul(v[0], v[1])),
                    )
                }
                "matmul_nt" => {
                    let k = rng.random_range(1..5);
                    (
                        vec![random_tensor(rng, vec![rows, k]), random_tensor(rng, vec![cols, k])],
                        Box::new(|t, v| t.matmul_nt(v[0], v[1])),
                    )
                }
                "add" => (
                    vec![random_tensor(rng, vec![rows, cols]), random_tensor(rng, vec![rows, cols])],
                    Box::new(|t, v| t.add(v[0], v[1])),
                ),
                "add_bias" => (
                    vec![random_tensor(rng, vec![rows, cols]), random_tensor(rng, vec![cols])],
                    Box::new(|t, v| t.add_bias(v[0], v[1])),
                ),
                "scale" => {
                    let s = rng.random_range(-2.0..2.0);
                    (
                        vec![random_tensor(rng, vec![rows, cols])],
                        Box::new(move |t, v| t.scale(v[0], s)),
                    )
                }
                "relu" => (
                    vec![random_tensor(rng, vec![rows, cols])],
                    Box::new(|t, v| t.relu(v[0])),
                ),
                "softmax" => (
                    vec![random_tensor(rng, vec![rows, cols])],
                    Box::new(|t, v| t.softmax(v[0])),
                ),
                "layer_norm" => (
                    vec![
                        random_tensor(rng, vec![rows, cols]),
                        random_tensor(rng, vec![cols]),
                        random_tensor(rng, vec![cols]),
                    ],
                    Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
                ),
                "concat" => (
                    vec![random_tensor(rng, vec![rows, cols]), random_tensor(rng, vec![rows, 2])],
                    Box::new(|t, v| t.concat(&[v[0], v[1], v[0]])),
                ),
                "concat_rows" => (
                    vec![random_tensor(rng, vec![rows, cols]), random_tensor(rng, vec![2, cols])],
                    Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
                ),
                "slice_cols" => {
                    let start = rng.random_range(0..cols - 1);
                    let len = rng.random_range(1..=cols - start);
                    (
                        vec![random_tensor(rng, vec![rows, cols])],
                        Box::new(move |t, v| t.slice_cols(v[0], start, len)),
                    )
                }
                "reduce_max" | "reduce_mean" => {
                    let n = rng.random_range(1..6);
                    let mask = random_mask(rng, rows, n);
                    let is_max = name == "reduce_max";
                    (
                        vec![random_tensor(rng, vec![rows, n, cols])],
                        Box::new(move |t, v| {
                            if is_max {
                                t.reduce_max(v[0], &mask)
                            } else {
                                t.reduce_mean(v[0], &mask)
                            }
                        }),
                    )
                }
                "gather_rows" => {
                    let idx: Vec<usize> = (0..rng.random_range(1..7))
                        .map(|_| rng.random_range(0..rows))
                        .collect();
                    (
                        vec![random_tensor(rng, vec![rows, cols])],
                        Box::new(move |t, v| t.gather_rows(v[0], &idx)),
                    )
                }
                "squared_error" => (
                    vec![random_tensor(rng, vec![rows, cols]), random_tensor(rng, vec![rows, cols])],
                    Box::new(|t, v| t.squared_error(v[0], v[1])),
                ),
                "reshape" => (
                    vec![random_tensor(rng, vec![rows, cols])],
                    Box::new(move |t, v| t.reshape(v[0], vec![cols, rows])),
                ),
                "normalize_rows" => (
                    vec![random_tensor(rng, vec![rows, cols])],
                    Box::new(|t, v| t.normalize_rows(v[0])),
                ),
                "cross_entropy" => {
                    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
                    (
                        vec![random_tensor(rng, vec![rows, cols])],
                        Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
                    )
                }
                other => return Err(Error::Usage(format!("unknown primitive {other}"))),
            };
        let proj_seed: u64 = rng.random();
        fd_check(&inputs, |t, v| {
            let out = build(t, v)?;
            project_to_scalar(t, out, proj_seed)
        })
    })
}

/// `Σ w ⊙ x` with fixed pseudo-random weights, built from tape primitives.
fn project_to_scalar(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(x);
    }
    let n: usize = shape.iter().product();
    let flat = t.reshape(x, vec![1, n])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random_tensor(&mut rng, vec![n, 1]))?;
    let s = t.matmul(flat, w)?;
    t.reshape(s, vec![1])
}

/// A graph that chains every primitive with random shapes and values.
pub fn composite_trial(seed: u64) -> Result<FdReport> {
    kink_free(seed, |rng| {
        let b = rng.random_range(2..4);
        let n = rng.random_range(2..5);
        let c = rng.random_range(2..4);
        let h = rng.random_range(3..5);
        let k = rng.random_range(2..4);
        let mask = random_mask(rng, b, n);
        let idx: Vec<usize> = (0..rng.random_range(2..5)).map(|_| rng.random_range(0..b)).collect();
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let inputs = vec![
            random_tensor(rng, vec![b, n, c]),
            random_tensor(rng, vec![c, h]),
            random_tensor(rng, vec![h]),
            random_tensor(rng, vec![h]),
            random_tensor(rng, vec![h]),
            random_tensor(rng, vec![h, k]),
            random_tensor(rng, vec![2 * idx.len(), idx.len()]),
        ];
        fd_check(&inputs, |t, v| {
            let x2 = t.reshape(v[0], vec![b * n, c])?;
            let pre = t.matmul(x2, v[1])?;
            let pre = t.add_bias(pre, v[2])?;
            let act = t.relu(pre)?;
            let act3 = t.reshape(act, vec![b, n, h])?;
            let pmax = t.reduce_max(act3, &mask)?;
            let pmean = t.reduce_mean(act3, &mask)?;
            let cat = t.concat(&[pmax, pmean])?;
            let s = t.slice_cols(cat, 1, h)?;
            let ln = t.layer_norm(s, v[3], v[4])?;
            let sm = t.softmax(ln)?;
            let lns = t.scale(ln, 0.3)?;
            let a = t.add(sm, lns)?;
            let g = t.gather_rows(a, &idx)?;
            let nr = t.normalize_rows(g)?;
            let sim = t.matmul_nt(nr, nr)?;
            let stacked = t.concat_rows(&[sim, sim])?;
            let l1 = t.squared_error(stacked, v[6])?;
            let logits = t.matmul(a, v[5])?;
            let l2 = t.cross_entropy(logits, &targets)?;
            t.add(l1, l2)
        })
    })
}
