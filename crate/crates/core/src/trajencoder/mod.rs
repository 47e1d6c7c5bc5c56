//! Timestep embedding and the causal Transformer trajectory encoder.

mod entropy;
mod instruction;
mod sigma_reparam;
mod transformer;

pub use entropy::attention_entropy;
pub use instruction::{GoalEmbedKind, InstructionEmbedder};
pub use sigma_reparam::SigmaReparamLinear;
pub use transformer::{Block, KvCache, LayerCache, Transformer};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor, Var};
use crate::nn::{Graph, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Real;

pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("sequence length {len} exceeds context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("attention row {row} sums to {sum}")]
    InvalidAttention { row: usize, sum: f64 },
    #[error("invalid timestep record: {0}")]
    InvalidRecord(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
}

/// One unified CMDP frame as fed to the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepRecord {
    pub observation: Vec<f64>,
    /// `None` at the first step of a trajectory (all-zero one-hot).
    pub prev_action: Option<usize>,
    pub prev_reward: f64,
    pub reset_flag: bool,
    /// `t / H`, in `[0, 1]`.
    pub time_feature: f64,
    /// `max_goals × goal_len` token ids, padded with [`PAD_TOKEN`].
    pub instruction_tokens: Vec<u32>,
}

impl TimestepRecord {
    /// An all-zero frame with padding tokens.
    pub fn zero(obs_dim: usize, tokens: usize) -> Self {
        Self {
            observation: vec![0.0; obs_dim],
            prev_action: None,
            prev_reward: 0.0,
            reset_flag: false,
            time_feature: 0.0,
            instruction_tokens: vec![PAD_TOKEN; tokens],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub obs_dim: usize,
    pub action_count: usize,
    pub vocab_size: usize,
    pub max_goals: usize,
    pub goal_len: usize,
    pub token_dim: usize,
    pub goal_embed: GoalEmbedKind,
    pub timestep_mlp_dims: Vec<usize>,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_context: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail("model_dim must be divisible by heads");
        }
        if self.max_context == 0 {
            return fail("max_context must be at least 1");
        }
        if self.timestep_mlp_dims.is_empty() {
            return fail("timestep encoder needs at least one layer");
        }
        if self.goal_embed.output_dim() == 0 || self.token_dim == 0 {
            return fail("goal embedding dims must be positive");
        }
        if self.vocab_size < 2 || self.max_goals == 0 || self.goal_len == 0 {
            return fail("instruction shape must be non-empty");
        }
        if self.action_count == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return fail("dimensions must be positive");
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.max_goals * self.goal_len
    }

    /// Width of the timestep MLP input.
    pub fn timestep_input_dim(&self) -> usize {
        self.obs_dim + self.action_count + 3 + self.goal_embed.output_dim()
    }
}

/// `B` sequences of `T` frames, flattened row-major, plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepBatch {
    pub batch: usize,
    pub len: usize,
    /// `(B·T, obs_dim + |A| + 3)` numeric features.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// `(B·T, tokens_per_step)`.
    pub tokens: Vec<u32>,
    /// `true` where the row is real data.
    pub mask: Vec<bool>,
}

impl TimestepBatch {
    /// Pads every sequence to the longest one with zero frames.
    pub fn from_sequences(
        cfg: &EncoderConfig,
        seqs: &[&[TimestepRecord]],
    ) -> Result<Self, EncoderError> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let feature_dim = cfg.obs_dim + cfg.action_count + 3;
        let per = cfg.tokens_per_step();
        let rows = seqs.len() * len;
        let mut features = Vec::with_capacity(rows * feature_dim);
        let mut tokens = Vec::with_capacity(rows * per);
        let mut mask = Vec::with_capacity(rows);
        for seq in seqs {
            for t in 0..len {
                match seq.get(t) {
                    Some(r) => {
                        push_record(cfg, r, &mut features)?;
                        tokens.extend_from_slice(&r.instruction_tokens);
                        mask.push(true);
                    }
                    None => {
                        features.extend(std::iter::repeat_n(0.0, feature_dim));
                        tokens.extend(std::iter::repeat_n(PAD_TOKEN, per));
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self {
            batch: seqs.len(),
            len,
            features,
            feature_dim,
            tokens,
            mask,
        })
    }
}

fn push_record(
    cfg: &EncoderConfig,
    r: &TimestepRecord,
    out: &mut Vec<f64>,
) -> Result<(), EncoderError> {
    let bad = |m: String| Err(EncoderError::InvalidRecord(m));
    if r.observation.len() != cfg.obs_dim {
        return bad(format!(
            "observation has {} entries, expected {}",
            r.observation.len(),
            cfg.obs_dim
        ));
    }
    if r.instruction_tokens.len() != cfg.tokens_per_step() {
        return bad(format!(
            "{} instruction tokens, expected {}",
            r.instruction_tokens.len(),
            cfg.tokens_per_step()
        ));
    }
    if !(0.0..=1.0).contains(&r.time_feature) {
        return bad(format!("time feature {} outside [0, 1]", r.time_feature));
    }
    if !r.observation.iter().all(|x| x.is_finite()) || !r.prev_reward.is_finite() {
        return bad("non-finite value".into());
    }
    if let Some(t) = r
        .instruction_tokens
        .iter()
        .find(|&&t| t as usize >= cfg.vocab_size)
    {
        return Err(EncoderError::TokenOutOfVocab {
            token: *t,
            vocab: cfg.vocab_size,
        });
    }
    out.extend_from_slice(&r.observation);
    let start = out.len();
    out.extend(std::iter::repeat_n(0.0, cfg.action_count));
    if let Some(a) = r.prev_action {
        if a >= cfg.action_count {
            return bad(format!(
                "previous action {a} outside {} actions",
                cfg.action_count
            ));
        }
        out[start + a] = 1.0;
    }
    out.push(r.prev_reward);
    out.push(if r.reset_flag { 1.0 } else { 0.0 });
    out.push(r.time_feature);
    Ok(())
}

/// Latent states `(B, T, model_dim)` and per-layer attention maps `(B, heads, T, T)`.
pub struct EncoderOutput<S> {
    pub latents: Var,
    pub attention: Vec<Tensor<S>>,
}

/// Timestep encoder, instruction embedder and Transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajEncoder {
    pub config: EncoderConfig,
    pub instruction: InstructionEmbedder,
    pub timestep: Mlp,
    /// Present when the timestep MLP width differs from `model_dim`.
    pub projection: Option<Linear>,
    pub transformer: Transformer,
}

impl TrajEncoder {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let instruction = InstructionEmbedder::new(
            store,
            "goal_embed",
            config.vocab_size,
            config.token_dim,
            config.max_goals,
            config.goal_len,
            &config.goal_embed,
            rng,
        );
        let timestep = Mlp::new(
            store,
            "timestep",
            config.timestep_input_dim(),
            &config.timestep_mlp_dims,
            rng,
        );
        let projection = (timestep.output_dim() != config.model_dim).then(|| {
            Linear::new(
                store,
                "timestep.proj",
                timestep.output_dim(),
                config.model_dim,
                rng,
            )
        });
        let transformer = Transformer::new(
            store,
            "transformer",
            config.model_dim,
            config.ff_dim,
            config.heads,
            config.layers,
            config.max_context,
            rng,
        );
        Ok(Self {
            config,
            instruction,
            timestep,
            projection,
            transformer,
        })
    }

    /// Embeds every row of the batch; returns `(B·T, model_dim)`.
    pub fn embed_timesteps<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        batch: &TimestepBatch,
    ) -> Result<Var, EncoderError> {
        let rows = batch.batch * batch.len;
        let goal = self.instruction.forward(g, &batch.tokens)?;
        let feats = Tensor::new(
            vec![rows, batch.feature_dim],
            batch.features.iter().map(|&x| S::c(x)).collect(),
        )?;
        let feats = g.constant(feats);
        let x = g.tape.concat(&[feats, goal], 1)?;
        let mut h = self.timestep.forward(g, x)?;
        if let Some(p) = &self.projection {
            h = p.forward(g, h)?;
        }
        Ok(h)
    }

    /// Embedding of a single frame, `(model_dim)`.
    pub fn encode_timestep<S: Real>(
        &self,
        store: &ParamStore<S>,
        record: &TimestepRecord,
    ) -> Result<Tensor<S>, EncoderError> {
        let batch = TimestepBatch::from_sequences(&self.config, &[std::slice::from_ref(record)])?;
        let mut g = Graph::new(store, false);
        let h = self.embed_timesteps(&mut g, &batch)?;
        Ok(g.value(h).clone().reshaped(&[self.config.model_dim])?)
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        batch: &TimestepBatch,
    ) -> Result<EncoderOutput<S>, EncoderError> {
        if batch.len > self.config.max_context {
            return Err(EncoderError::SequenceTooLong {
                len: batch.len,
                max: self.config.max_context,
            });
        }
        let h = self.embed_timesteps(g, batch)?;
        let h = g
            .tape
            .reshape(h, &[batch.batch, batch.len, self.config.model_dim])?;
        self.transformer.forward(g, h)
    }

    /// Latents `(m, model_dim)` of `records`, which continue the sequence held in `cache`.
    pub fn forward_cached<S: Real>(
        &self,
        store: &ParamStore<S>,
        records: &[TimestepRecord],
        cache: &mut KvCache<S>,
    ) -> Result<Tensor<S>, EncoderError> {
        let batch = TimestepBatch::from_sequences(&self.config, &[records])?;
        let mut g = Graph::new(store, false);
        let h = self.embed_timesteps(&mut g, &batch)?;
        let h = g.tape.reshape(h, &[1, batch.len, self.config.model_dim])?;
        let out = self.transformer.forward_cached(&mut g, h, cache)?;
        Ok(g.value(out)
            .clone()
            .reshaped(&[batch.len, self.config.model_dim])?)
    }

    /// Advances every σReparam power iteration by one step (training forward passes only).
    pub fn refresh_spectral<S: Real>(&mut self, store: &ParamStore<S>) {
        self.transformer.refresh_spectral(store);
    }

    pub fn sigma_layers(&self) -> Vec<&SigmaReparamLinear> {
        self.transformer.sigma_layers()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.instruction.params();
        ids.extend(self.timestep.params());
        if let Some(p) = &self.projection {
            ids.extend(p.params());
        }
        ids.extend(self.transformer.params());
        ids
    }
}
