//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, `p ← p − lr·λ·p`, applied before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// A parameter whose gradient contains NaN or ±∞.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient in parameter {name} (element {index})")]
pub struct NonFiniteGradient {
    pub name: String,
    pub index: usize,
}

/// First and second moments for every tensor of a [`ParamStore`], indexed
/// like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S: Scalar = f32> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<S>> = store.iter().map(|(_, t)| vec![S::ZERO; t.numel()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), NonFiniteGradient> {
        for (name, t) in store.iter() {
            if let Some(g) = &t.grad {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(NonFiniteGradient {
                        name: name.to_string(),
                        index,
                    });
                }
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for (k, (_, t)) in store.tensors_mut().enumerate() {
            let Some(g) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i].f64();
                let mi = c.beta1 * m[i].f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = S::of(mi);
                v[i] = S::of(vi);
                let mut pi = p.f64();
                if c.weight_decay != 0.0 {
                    pi -= c.lr * c.weight_decay * pi;
                }
                pi -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *p = S::of(pi);
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}

/// L2 norm over every gradient in the store, accumulated in `f64`.
pub fn global_grad_norm<S: Scalar>(store: &ParamStore<S>) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in store.tensors_mut() {
            if let Some(g) = t.grad.as_mut() {
                for v in g.iter_mut() {
                    *v = S::of(v.f64() * scale);
                }
            }
        }
    }
    norm
}
