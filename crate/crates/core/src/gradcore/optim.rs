use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters absent from `grads` see a zero
    /// gradient, so their moments still decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.param(id);
            let p = params.get_mut(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        detail: format!("grad {:?} for param {:?}", g.shape(), p.shape()),
                    });
                }
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.numel() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data_mut()[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {i} after update")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_min`.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    lr_peak: f64,
    lr_min: f64,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return lr_peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return lr_min;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tape;

    fn quad_step(x0: f64, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        // squared_error is a mean, so this is x².
        let loss = tape.squared_error(x, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        adam.step(&mut store, &g, lr).unwrap();
        store.get(id).data()[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        assert!((quad_step(1.0, 0.1) - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut tape = Tape::new();
        let w = tape.param(&store, id).unwrap();
        let z = tape.scale(w, 0.0).unwrap();
        let zero = tape.constant(Tensor::zeros(vec![2])).unwrap();
        let loss = tape.squared_error(z, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        adam.step(&mut store, &g, 0.1).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn schedule_endpoints_and_monotone_tail() {
        let (total, warm, peak, min) = (1000, 50, 1e-3, 1e-5);
        assert_eq!(lr_schedule(0, total, warm, peak, min), 0.0);
        assert_eq!(lr_schedule(warm, total, warm, peak, min), peak);
        assert!((lr_schedule(total, total, warm, peak, min) - min).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in warm..=total {
            let lr = lr_schedule(s, total, warm, peak, min);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
