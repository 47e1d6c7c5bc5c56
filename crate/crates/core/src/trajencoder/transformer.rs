use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, EncoderOutput, SigmaReparamLinear};
use crate::diffcore::{Tensor, Var, LEAKY_SLOPE};
use crate::nn::{normal_tensor, Graph, LayerNorm, ParamId, ParamStore};
use crate::scalar::Real;

const MASK_FILL: f64 = -1e9;

/// Pre-norm block with NormFormer-style extra normalization.
///
/// Attention: `x + LN₂(O(attn(QKV(LN₁(x)))))`.
/// Feed-forward: `x + LN₅(F₂(LN₄(leaky(F₁(LN₃(x))))))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln_qkv: LayerNorm,
    pub qkv: SigmaReparamLinear,
    pub out: SigmaReparamLinear,
    pub ln_attn_out: LayerNorm,
    pub ln_ff: LayerNorm,
    pub ff1: SigmaReparamLinear,
    pub ln_ff_mid: LayerNorm,
    pub ff2: SigmaReparamLinear,
    pub ln_ff_out: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl Block {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        ff_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_qkv: LayerNorm::new(store, &format!("{name}.ln_qkv"), dim),
            qkv: SigmaReparamLinear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: SigmaReparamLinear::new(store, &format!("{name}.attn_out"), dim, dim, rng),
            ln_attn_out: LayerNorm::new(store, &format!("{name}.ln_attn_out"), dim),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff1: SigmaReparamLinear::new(store, &format!("{name}.ff1"), dim, ff_dim, rng),
            ln_ff_mid: LayerNorm::new(store, &format!("{name}.ln_ff_mid"), ff_dim),
            ff2: SigmaReparamLinear::new(store, &format!("{name}.ff2"), ff_dim, dim, rng),
            ln_ff_out: LayerNorm::new(store, &format!("{name}.ln_ff_out"), dim),
            heads,
            dim,
        }
    }

    /// `x` is `(B, T, dim)`; returns the new residual stream and the attention weights.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        causal: &Rc<[bool]>,
    ) -> Result<(Var, Tensor<S>), EncoderError> {
        let shape = g.tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let n = self.ln_qkv.forward(g, x)?;
        let qkv = self.qkv.forward(g, n)?;
        let mut split = |i: usize| -> Result<Var, EncoderError> {
            let part = g.tape.slice(qkv, 2, i * d, (i + 1) * d)?;
            let part = g.tape.reshape(part, &[b, t, h, dh])?;
            Ok(g.tape.transpose(part, 1, 2)?)
        };
        let q = split(0)?;
        let k = split(1)?;
        let v = split(2)?;
        self.finish(g, x, q, k, v, causal)
    }

    /// Forward over `m` new rows of a single sequence, attending to cached keys and values.
    /// `x` is `(1, m, dim)`; `cache` gains the new rows.
    pub fn forward_cached<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        cache: &mut LayerCache<S>,
    ) -> Result<Var, EncoderError> {
        let m = g.tape.shape(x)[1];
        let d = self.dim;
        let (h, dh) = (self.heads, d / self.heads);
        let n = self.ln_qkv.forward(g, x)?;
        let qkv = self.qkv.forward(g, n)?;
        let mut split = |i: usize| -> Result<Var, EncoderError> {
            let part = g.tape.slice(qkv, 2, i * d, (i + 1) * d)?;
            let part = g.tape.reshape(part, &[1, m, h, dh])?;
            Ok(g.tape.transpose(part, 1, 2)?)
        };
        let q = split(0)?;
        let mut k = split(1)?;
        let mut v = split(2)?;
        let c = cache.len();
        if let (Some(ck), Some(cv)) = (&cache.keys, &cache.values) {
            let ck = g.constant(ck.clone());
            let cv = g.constant(cv.clone());
            k = g.tape.concat(&[ck, k], 2)?;
            v = g.tape.concat(&[cv, v], 2)?;
        }
        cache.keys = Some(g.value(k).clone());
        cache.values = Some(g.value(v).clone());
        let total = c + m;
        let mask: Rc<[bool]> = (0..m * total).map(|i| i % total > c + i / total).collect();
        Ok(self.finish(g, x, q, k, v, &mask)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        q: Var,
        k: Var,
        v: Var,
        mask: &Rc<[bool]>,
    ) -> Result<(Var, Tensor<S>), EncoderError> {
        let shape = g.tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let dh = self.dim / self.heads;
        let kt = g.tape.transpose(k, 2, 3)?;
        let scores = g.tape.matmul(q, kt)?;
        let scores = g.tape.scale(scores, S::c(1.0 / (dh as f64).sqrt()));
        let scores = g.tape.masked_fill(scores, mask.clone(), S::c(MASK_FILL))?;
        let attn = g.tape.softmax(scores, 3)?;
        let weights = g.value(attn).clone();
        let ctx = g.tape.matmul(attn, v)?;
        let ctx = g.tape.transpose(ctx, 1, 2)?;
        let ctx = g.tape.reshape(ctx, &[b, t, d])?;
        let a = self.out.forward(g, ctx)?;
        let a = self.ln_attn_out.forward(g, a)?;
        let x = g.tape.add(x, a)?;

        let f = self.ln_ff.forward(g, x)?;
        let f = self.ff1.forward(g, f)?;
        let f = g.tape.leaky_relu(f, S::c(LEAKY_SLOPE));
        let f = self.ln_ff_mid.forward(g, f)?;
        let f = self.ff2.forward(g, f)?;
        let f = self.ln_ff_out.forward(g, f)?;
        Ok((g.tape.add(x, f)?, weights))
    }

    pub fn sigma_layers(&self) -> [&SigmaReparamLinear; 4] {
        [&self.qkv, &self.out, &self.ff1, &self.ff2]
    }

    fn sigma_layers_mut(&mut self) -> [&mut SigmaReparamLinear; 4] {
        [&mut self.qkv, &mut self.out, &mut self.ff1, &mut self.ff2]
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for ln in [
            &self.ln_qkv,
            &self.ln_attn_out,
            &self.ln_ff,
            &self.ln_ff_mid,
            &self.ln_ff_out,
        ] {
            ids.extend(ln.params());
        }
        for l in self.sigma_layers() {
            ids.extend(l.params());
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub max_context: usize,
    pub dim: usize,
}

impl Transformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        ff_dim: usize,
        heads: usize,
        layers: usize,
        max_context: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let positions = store.add(
            format!("{name}.positions"),
            normal_tensor(rng, &[max_context, dim], 0.02),
            true,
        );
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), dim, ff_dim, heads, rng))
            .collect();
        let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), dim);
        Self {
            positions,
            blocks,
            ln_final,
            max_context,
            dim,
        }
    }

    /// `x` is `(B, T, dim)` timestep embeddings.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
    ) -> Result<EncoderOutput<S>, EncoderError> {
        let t = g.tape.shape(x)[1];
        if t > self.max_context {
            return Err(EncoderError::SequenceTooLong {
                len: t,
                max: self.max_context,
            });
        }
        let pos = g.param(self.positions);
        let pos = g.tape.slice(pos, 0, 0, t)?;
        let mut h = g.tape.add(x, pos)?;
        let causal = causal_mask(t);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, w) = block.forward(g, h, &causal)?;
            h = next;
            attention.push(w);
        }
        let latents = self.ln_final.forward(g, h)?;
        Ok(EncoderOutput { latents, attention })
    }

    /// Latents `(1, m, dim)` of `m` new rows appended to the cached prefix.
    pub fn forward_cached<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        cache: &mut KvCache<S>,
    ) -> Result<Var, EncoderError> {
        let m = g.tape.shape(x)[1];
        let start = cache.len();
        if start + m > self.max_context {
            return Err(EncoderError::SequenceTooLong {
                len: start + m,
                max: self.max_context,
            });
        }
        if cache.layers.len() != self.blocks.len() {
            cache.layers = vec![LayerCache::default(); self.blocks.len()];
        }
        let pos = g.param(self.positions);
        let pos = g.tape.slice(pos, 0, start, start + m)?;
        let mut h = g.tape.add(x, pos)?;
        for (block, c) in self.blocks.iter().zip(&mut cache.layers) {
            h = block.forward_cached(g, h, c)?;
        }
        Ok(self.ln_final.forward(g, h)?)
    }

    pub fn refresh_spectral<S: Real>(&mut self, store: &ParamStore<S>) {
        for block in &mut self.blocks {
            for l in block.sigma_layers_mut() {
                l.spectral_estimate(store);
            }
        }
    }

    pub fn sigma_layers(&self) -> Vec<&SigmaReparamLinear> {
        self.blocks.iter().flat_map(|b| b.sigma_layers()).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.positions];
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids.extend(self.ln_final.params());
        ids
    }
}

/// Keys and values `(1, heads, t, head_dim)` of one block.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<S> {
    keys: Option<Tensor<S>>,
    values: Option<Tensor<S>>,
}

impl<S: Real> LayerCache<S> {
    fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[2])
    }
}

/// Per-block attention state of one sequence during step-by-step inference.
#[derive(Clone, Debug, Default)]
pub struct KvCache<S> {
    layers: Vec<LayerCache<S>>,
}

impl<S: Real> KvCache<S> {
    /// Number of rows already encoded.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.layers.clear();
    }
}

/// `true` above the diagonal: query `i` may not see key `j > i`.
fn causal_mask(t: usize) -> Rc<[bool]> {
    (0..t * t).map(|k| k % t > k / t).collect()
}
