use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(config: AdamWConfig, params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// Applies one step; `grads[i]` belongs to parameter index `i`, `None` means no gradient.
    pub fn apply(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let (b1, b2) = (S::c(c.beta1), S::c(c.beta2));
        let (one_b1, one_b2) = (S::c(1.0 - c.beta1), S::c(1.0 - c.beta2));
        let lr_t = S::c(c.lr / bc1);
        let inv_bc2 = S::c(1.0 / bc2);
        let eps = S::c(c.eps);
        let decay = S::c(1.0 - c.lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            if !store.param(id).trainable {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let matrix = store.get(id).rank() >= 2;
            let p = store.get_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                if matrix {
                    *p *= decay;
                }
                *p -= lr_t * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all present gradients.
pub fn global_norm<S: Real>(grads: &[Option<Tensor<S>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.l2_norm_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<S: Real>(grads: &mut [Option<Tensor<S>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let f = S::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
    norm
}

/// `target ← (1 − τ)·target + τ·online` for each pair.
pub fn polyak<S: Real>(store: &mut ParamStore<S>, pairs: &[(ParamId, ParamId)], tau: f64) {
    let (keep, mix) = (S::c(1.0 - tau), S::c(tau));
    for &(online, target) in pairs {
        let src = store.get(online).clone();
        for (t, &o) in store.get_mut(target).data_mut().iter_mut().zip(src.data()) {
            *t = keep * *t + mix * o;
        }
    }
}
