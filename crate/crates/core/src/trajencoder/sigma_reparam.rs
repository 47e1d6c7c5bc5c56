use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tensor, Var};
use crate::nn::{normal_tensor, uniform_tensor, Graph, ParamId, ParamStore};
use crate::scalar::Real;

/// Power-iteration steps run once at construction so the first forward pass starts from a
/// converged estimate.
const WARMUP_ITERS: usize = 20;

/// Linear layer whose effective weight is `(gain / σ̂(W)) · W`, with `σ̂` tracked by one
/// power-iteration step per training forward pass.
///
/// `W` is stored `(in, out)`; as a map it acts as `Wᵀ`, so `u` lives in the output space and
/// `v` in the input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReparamLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn normalize(x: &mut [f64]) -> bool {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        x.iter_mut().for_each(|a| *a /= n);
        true
    } else {
        false
    }
}

fn random_unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let mut x = normal_tensor::<f64>(rng, &[n], 1.0).into_data();
        if normalize(&mut x) {
            return x;
        }
    }
}

impl SigmaReparamLinear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[fan_in, fan_out], bound),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        let gain = store.add(format!("{name}.gain"), Tensor::scalar(S::one()), true);
        let mut layer = Self {
            weight,
            bias,
            gain,
            fan_in,
            fan_out,
            u: random_unit(rng, fan_out),
            v: random_unit(rng, fan_in),
        };
        for _ in 0..WARMUP_ITERS {
            layer.spectral_estimate(store);
        }
        layer
    }

    /// Builds a layer around existing parameters with explicit iteration vectors.
    pub fn from_parts(
        weight: ParamId,
        bias: ParamId,
        gain: ParamId,
        fan_in: usize,
        fan_out: usize,
        u: Vec<f64>,
        v: Vec<f64>,
    ) -> Self {
        Self {
            weight,
            bias,
            gain,
            fan_in,
            fan_out,
            u,
            v,
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// One power-iteration step, `u ← normalize(W v)`, `v ← normalize(Wᵀ u)`, returning
    /// `σ̂ = uᵀ W v`. A zero matrix leaves `u` and `v` untouched and reports 0.
    pub fn spectral_estimate<S: Real>(&mut self, store: &ParamStore<S>) -> f64 {
        let m = store.get(self.weight).data();
        let (rows, cols) = (self.fan_in, self.fan_out);
        let mut u = vec![0.0; cols];
        for i in 0..rows {
            let vi = self.v[i];
            for j in 0..cols {
                u[j] += m[i * cols + j].as_f64() * vi;
            }
        }
        if !normalize(&mut u) {
            return 0.0;
        }
        let mut v = vec![0.0; rows];
        for i in 0..rows {
            v[i] = (0..cols).map(|j| m[i * cols + j].as_f64() * u[j]).sum();
        }
        if !normalize(&mut v) {
            return 0.0;
        }
        self.u = u;
        self.v = v;
        self.sigma(store)
    }

    /// Current estimate `uᵀ W v` without advancing the iteration.
    pub fn sigma<S: Real>(&self, store: &ParamStore<S>) -> f64 {
        let m = store.get(self.weight).data();
        let cols = self.fan_out;
        let mut s = 0.0;
        for i in 0..self.fan_in {
            for j in 0..cols {
                s += self.v[i] * m[i * cols + j].as_f64() * self.u[j];
            }
        }
        s
    }

    /// Effective weight `(gain / σ̂) · W` as a plain value.
    pub fn effective_weight<S: Real>(&self, store: &ParamStore<S>) -> Tensor<S> {
        let sigma = self.sigma(store);
        let w = store.get(self.weight);
        if sigma == 0.0 {
            return w.clone();
        }
        let factor = S::c(store.get(self.gain).item().as_f64() / sigma);
        w.map(|x| x * factor)
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let effective = if self.sigma(g.store()) == 0.0 {
            w
        } else {
            // σ̂ = Σᵢⱼ vᵢ Wᵢⱼ uⱼ stays differentiable in W; u and v are constants.
            let mut outer = Vec::with_capacity(self.fan_in * self.fan_out);
            for &vi in &self.v {
                outer.extend(self.u.iter().map(|&uj| S::c(vi * uj)));
            }
            let outer = g.constant(Tensor::new(vec![self.fan_in, self.fan_out], outer)?);
            let prod = g.tape.mul(w, outer)?;
            let sigma = g.tape.sum(prod, None)?;
            let gain = g.param(self.gain);
            let factor = g.tape.div(gain, sigma)?;
            g.tape.mul(w, factor)?
        };
        let y = g.tape.matmul(x, effective)?;
        g.tape.add(y, b)
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.weight, self.bias, self.gain]
    }
}
