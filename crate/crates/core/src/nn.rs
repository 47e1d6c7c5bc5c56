//! Parameter storage and the small layer vocabulary shared by the encoder and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Gradients, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Frozen parameters (target-network copies) are bound as constants.
    pub trainable: bool,
}

/// Flat, ordered collection of every tensor the agent owns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// A tape plus lazily bound parameters.
pub struct Graph<'p, S: Real> {
    pub tape: Tape<S>,
    store: &'p ParamStore<S>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p, S: Real> Graph<'p, S> {
    /// With `track` unset nothing requires gradients (inference mode).
    pub fn new(store: &'p ParamStore<S>, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track,
        }
    }

    /// Continues an existing tape with every parameter bound as a constant.
    pub fn from_tape(store: &'p ParamStore<S>, tape: Tape<S>) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            track: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = self.tape.leaf(p.value.clone(), self.track && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient per parameter index; `None` where a parameter was unused or frozen.
    pub fn param_grads(&self, grads: &mut Gradients<S>) -> Vec<Option<Tensor<S>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.tape.value(v)
    }
}

pub(crate) fn uniform_tensor<S: Real>(
    rng: &mut impl Rng,
    shape: &[usize],
    bound: f64,
) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::c(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) fn normal_tensor<S: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::c(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map `x · W + b` over the last axis. `W` is stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
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
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(x, w)?;
        g.tape.add(y, b)
    }

    /// Copies this layer's parameters into fresh, frozen entries.
    pub fn frozen_copy<S: Real>(&self, store: &mut ParamStore<S>, name: &str) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            store.get(self.weight).clone(),
            false,
        );
        let bias = store.add(format!("{name}.bias"), store.get(self.bias).clone(), false);
        Self {
            weight,
            bias,
            ..*self
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::full(&[width], S::one()),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]), true);
        Self { gain, bias }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var, DiffError> {
        let n = g.tape.layer_norm(x, S::c(LAYER_NORM_EPS))?;
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.tape.mul(n, gain)?;
        g.tape.add(y, bias)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Stack of linear layers with Leaky ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the output width of each layer.
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut fan_in = input;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), fan_in, d, rng));
            fan_in = d;
        }
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tape.leaky_relu(h, S::c(LEAKY_SLOPE));
            }
        }
        Ok(h)
    }

    pub fn frozen_copy<S: Real>(&self, store: &mut ParamStore<S>, name: &str) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.frozen_copy(store, &format!("{name}.{i}")))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}
