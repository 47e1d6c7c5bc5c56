use serde::{Deserialize, Serialize};

use crate::nn::{Linear, ParamStore};
use crate::scalar::Real;

pub const POPART_BETA: f64 = 5e-4;
pub const POPART_SIGMA_MIN: f64 = 1e-4;

/// Running first and second moments of the value targets for one discount factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopArtState {
    pub mu: f64,
    pub nu: f64,
    pub beta: f64,
    pub sigma_min: f64,
    /// Number of updates so far; drives the bias correction of the step size.
    pub updates: u64,
    /// Use `β / (1 − (1 − β)ᵗ)` instead of a constant `β`.
    pub bias_correction: bool,
}

impl Default for PopArtState {
    fn default() -> Self {
        Self::new(POPART_BETA, POPART_SIGMA_MIN, true)
    }
}

impl PopArtState {
    pub fn new(beta: f64, sigma_min: f64, bias_correction: bool) -> Self {
        Self {
            mu: 0.0,
            nu: 1.0,
            beta,
            sigma_min,
            updates: 0,
            bias_correction,
        }
    }

    pub fn sigma(&self) -> f64 {
        (self.nu - self.mu * self.mu)
            .max(self.sigma_min * self.sigma_min)
            .sqrt()
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mu) / self.sigma()
    }

    pub fn unnormalize(&self, x: f64) -> f64 {
        x * self.sigma() + self.mu
    }

    fn step_size(&self) -> f64 {
        if self.bias_correction {
            self.beta / (1.0 - (1.0 - self.beta).powf(self.updates as f64))
        } else {
            self.beta
        }
    }

    /// Folds a batch of unnormalized targets into the running moments.
    pub fn update(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        self.updates += 1;
        let beta = self.step_size();
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let sq = targets.iter().map(|x| x * x).sum::<f64>() / n;
        self.mu = (1.0 - beta) * self.mu + beta * mean;
        self.nu = (1.0 - beta) * self.nu + beta * sq;
    }
}

/// Rescales output columns `[col_start, col_end)` of `layer` so that `σ·ŷ + μ` is unchanged
/// when the statistics move from `old` to `new`.
pub fn popart_rescale<S: Real>(
    store: &mut ParamStore<S>,
    layer: &Linear,
    cols: std::ops::Range<usize>,
    old: &PopArtState,
    new: &PopArtState,
) {
    let (s_old, s_new) = (old.sigma(), new.sigma());
    let ratio = S::c(s_old / s_new);
    let w = store.get_mut(layer.weight);
    let n = layer.fan_out;
    for row in w.data_mut().chunks_mut(n) {
        for x in &mut row[cols.clone()] {
            *x *= ratio;
        }
    }
    let b = store.get_mut(layer.bias);
    for x in &mut b.data_mut()[cols] {
        *x = S::c((s_old * x.as_f64() + old.mu - new.mu) / s_new);
    }
}
