//! Actor-critic heads on the shared encoder, their losses, and the combined update.

mod gamma;
mod optim;
mod popart;

pub use gamma::GammaSet;
pub use optim::{clip_global_norm, global_norm, polyak, AdamW, AdamWConfig};
pub use popart::{popart_rescale, PopArtState, POPART_BETA, POPART_SIGMA_MIN};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor, Var};
use crate::nn::{Graph, Mlp, ParamId, ParamStore};
use crate::scalar::Real;
use crate::trajencoder::{
    attention_entropy, EncoderConfig, EncoderError, KvCache, TimestepBatch, TimestepRecord,
    TrajEncoder,
};

/// Floor inside `log π`.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite TD target for gamma index {gamma_index}")]
    NonFiniteTarget { gamma_index: usize },
    #[error("non-finite loss: td={td} pg={pg} fbc={fbc}")]
    NonFiniteLoss { td: f64, pg: f64, fbc: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub td: f64,
    pub pg: f64,
    pub fbc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            td: 10.0,
            pg: 1.0,
            fbc: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub gammas: GammaSet,
    pub critics: usize,
    /// Critics in the clipped target.
    pub clipped_critics: usize,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub tau: f64,
    pub popart_beta: f64,
    pub popart_sigma_min: f64,
    pub popart_bias_correction: bool,
    /// Hidden widths of the actor and critic MLPs.
    pub actor_dims: Vec<usize>,
    pub critic_dims: Vec<usize>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gammas: GammaSet::default_list(),
            critics: 4,
            clipped_critics: 2,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            tau: 0.003,
            popart_beta: POPART_BETA,
            popart_sigma_min: POPART_SIGMA_MIN,
            popart_bias_correction: true,
            actor_dims: vec![256, 256],
            critic_dims: vec![256, 256],
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |m: &str| Err(LearnerError::Config(m.into()));
        if self.critics < 2 {
            return fail("at least 2 critics are required");
        }
        if self.clipped_critics < 2 || self.clipped_critics > self.critics {
            return fail("clipped critics must satisfy 2 <= m <= critics");
        }
        let w = self.weights;
        if [w.td, w.pg, w.fbc]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return fail("loss weights must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau must lie in [0, 1]");
        }
        if !(self.popart_beta > 0.0 && self.popart_beta <= 1.0) || self.popart_sigma_min <= 0.0 {
            return fail("popart beta must lie in (0, 1] and sigma_min be positive");
        }
        if self.grad_clip <= 0.0 {
            return fail("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Actor and critic ensemble with frozen target copies. Each head emits `γ_N × |A|` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    pub actor: Mlp,
    pub critics: Vec<Mlp>,
    pub target_actor: Mlp,
    pub target_critics: Vec<Mlp>,
}

impl Heads {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        latent_dim: usize,
        outputs: usize,
        config: &LearnerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = |hidden: &[usize]| hidden.iter().copied().chain([outputs]).collect::<Vec<_>>();
        let actor = Mlp::new(store, "actor", latent_dim, &dims(&config.actor_dims), rng);
        let critics: Vec<Mlp> = (0..config.critics)
            .map(|c| {
                Mlp::new(
                    store,
                    &format!("critic{c}"),
                    latent_dim,
                    &dims(&config.critic_dims),
                    rng,
                )
            })
            .collect();
        let target_actor = actor.frozen_copy(store, "target_actor");
        let target_critics = critics
            .iter()
            .enumerate()
            .map(|(c, m)| m.frozen_copy(store, &format!("target_critic{c}")))
            .collect();
        Self {
            actor,
            critics,
            target_actor,
            target_critics,
        }
    }

    /// `(online, target)` parameter pairs for the polyak update.
    pub fn target_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let mut pairs: Vec<_> = self
            .actor
            .params()
            .into_iter()
            .zip(self.target_actor.params())
            .collect();
        for (c, t) in self.critics.iter().zip(&self.target_critics) {
            pairs.extend(c.params().into_iter().zip(t.params()));
        }
        pairs
    }

    pub fn critic_params(&self) -> Vec<ParamId> {
        self.critics.iter().flat_map(|c| c.params()).collect()
    }
}

/// Sequences of `T` frames with the `T − 1` transitions between consecutive rows.
///
/// Transition `t` goes from row `t` to row `t + 1`: `actions[t]` and `rewards[t]` are the
/// previous action and reward recorded in row `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerBatch {
    pub steps: TimestepBatch,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub mask: Vec<bool>,
}

impl LearnerBatch {
    /// Derives transitions from padded frame sequences; `dones[b]` marks whether the last real
    /// row of sequence `b` is terminal.
    pub fn from_sequences(
        cfg: &EncoderConfig,
        seqs: &[&[TimestepRecord]],
        terminal: &[bool],
    ) -> Result<Self, LearnerError> {
        let steps = TimestepBatch::from_sequences(cfg, seqs)?;
        let n = steps.len.saturating_sub(1);
        let mut out = Self {
            actions: Vec::with_capacity(seqs.len() * n),
            rewards: Vec::with_capacity(seqs.len() * n),
            dones: Vec::with_capacity(seqs.len() * n),
            mask: Vec::with_capacity(seqs.len() * n),
            steps,
        };
        for (b, seq) in seqs.iter().enumerate() {
            for t in 0..n {
                match seq.get(t + 1) {
                    Some(next) => {
                        let a = next.prev_action.ok_or_else(|| {
                            LearnerError::Batch(format!(
                                "row {} of sequence {b} has no previous action",
                                t + 1
                            ))
                        })?;
                        out.actions.push(a);
                        out.rewards.push(next.prev_reward);
                        out.dones
                            .push(terminal.get(b).copied().unwrap_or(false) && t + 2 == seq.len());
                        out.mask.push(true);
                    }
                    None => {
                        out.actions.push(0);
                        out.rewards.push(0.0);
                        out.dones.push(false);
                        out.mask.push(false);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn transitions(&self) -> usize {
        self.steps.batch * self.steps.len.saturating_sub(1)
    }

    fn validate(&self, actions: usize) -> Result<(), LearnerError> {
        let n = self.transitions();
        if [
            self.actions.len(),
            self.rewards.len(),
            self.dones.len(),
            self.mask.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(LearnerError::Batch(format!("expected {n} transitions")));
        }
        if self.steps.len < 2 {
            return Err(LearnerError::Batch(
                "sequences need at least two rows".into(),
            ));
        }
        if self.actions.iter().any(|&a| a >= actions) {
            return Err(LearnerError::Batch("action out of range".into()));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(LearnerError::Batch("no valid transitions".into()));
        }
        Ok(())
    }
}

/// Graph nodes and values produced by one loss evaluation.
pub struct LossTerms {
    pub td: Var,
    pub pg: Var,
    pub fbc: Var,
    /// Unnormalized TD targets of valid transitions, one list per γ.
    pub targets: Vec<Vec<f64>>,
    /// Mean attention entropy over layers and heads.
    pub attention_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub loss_td: f64,
    pub loss_pg: f64,
    pub loss_fbc: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub attn_entropy_mean: f64,
}

/// Every learnable tensor plus the optimizer, PopArt and target state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Agent<S: Real> {
    pub store: ParamStore<S>,
    pub encoder: TrajEncoder,
    pub heads: Heads,
    pub popart: Vec<PopArtState>,
    pub optimizer: AdamW<S>,
    pub config: LearnerConfig,
    pub updates: u64,
}

impl<S: Real> Agent<S> {
    pub fn new(
        encoder_cfg: EncoderConfig,
        config: LearnerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, LearnerError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let outputs = config.gammas.len() * encoder_cfg.action_count;
        let latent = encoder_cfg.model_dim;
        let encoder = TrajEncoder::new(&mut store, encoder_cfg, rng)?;
        let heads = Heads::new(&mut store, latent, outputs, &config, rng);
        let popart = (0..config.gammas.len())
            .map(|_| {
                PopArtState::new(
                    config.popart_beta,
                    config.popart_sigma_min,
                    config.popart_bias_correction,
                )
            })
            .collect();
        let optimizer = AdamW::new(config.optimizer.clone(), store.len());
        Ok(Self {
            store,
            encoder,
            heads,
            popart,
            optimizer,
            config,
            updates: 0,
        })
    }

    pub fn action_count(&self) -> usize {
        self.encoder.config.action_count
    }

    pub fn gamma_count(&self) -> usize {
        self.config.gammas.len()
    }

    /// One random `m`-of-`C` critic subset per γ, sorted.
    pub fn draw_subsets(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        (0..self.gamma_count())
            .map(|_| {
                let mut s =
                    sample(rng, self.config.critics, self.config.clipped_critics).into_vec();
                s.sort_unstable();
                s
            })
            .collect()
    }

    /// Per-`γ, a` constants `(σ_g, μ_g)` broadcast over `(G, A)`.
    fn popart_tensors(&self) -> (Tensor<S>, Tensor<S>) {
        let a = self.action_count();
        let shape = vec![self.gamma_count(), a];
        let sig = self
            .popart
            .iter()
            .flat_map(|p| std::iter::repeat_n(S::c(p.sigma()), a))
            .collect();
        let mu = self
            .popart
            .iter()
            .flat_map(|p| std::iter::repeat_n(S::c(p.mu), a))
            .collect();
        (
            Tensor::new(shape.clone(), sig).expect("shape"),
            Tensor::new(shape, mu).expect("shape"),
        )
    }

    /// Elementwise minimum over each γ's critic subset; inputs and output are `(N, G, A)`.
    fn clipped(
        g: &mut Graph<'_, S>,
        qs: &[Var],
        subsets: &[Vec<usize>],
    ) -> Result<Var, LearnerError> {
        let mut per_gamma = Vec::with_capacity(subsets.len());
        for (gi, subset) in subsets.iter().enumerate() {
            let parts = subset
                .iter()
                .map(|&c| g.tape.slice(qs[c], 1, gi, gi + 1))
                .collect::<Result<Vec<_>, _>>()?;
            per_gamma.push(g.tape.min_over_set(&parts)?);
        }
        Ok(g.tape.concat(&per_gamma, 1)?)
    }

    fn head(g: &mut Graph<'_, S>, mlp: &Mlp, x: Var, shape: &[usize]) -> Result<Var, LearnerError> {
        let y = mlp.forward(g, x)?;
        Ok(g.tape.reshape(y, shape)?)
    }

    /// Builds all three loss terms on `g`. `subsets` holds each γ's clipped-critic indices.
    pub fn losses(
        &self,
        g: &mut Graph<'_, S>,
        batch: &LearnerBatch,
        subsets: &[Vec<usize>],
    ) -> Result<LossTerms, LearnerError> {
        let (na, ng) = (self.action_count(), self.gamma_count());
        batch.validate(na)?;
        let (b, t, d) = (
            batch.steps.batch,
            batch.steps.len,
            self.encoder.config.model_dim,
        );
        let n = b * (t - 1);
        let out = self.encoder.forward(g, &batch.steps)?;
        let entropy = mean_entropy(&out.attention, &batch.steps.mask)?;
        let s = g.tape.slice(out.latents, 1, 0, t - 1)?;
        let s = g.tape.reshape(s, &[n, d])?;
        let next = g.tape.slice(out.latents, 1, 1, t)?;
        let next = g.tape.reshape(next, &[n, d])?;
        let next = g.tape.stop_gradient(next);
        let qshape = [n, ng, na];

        let valid = batch.mask.iter().filter(|&&m| m).count() as f64;
        let w: Vec<f64> = batch
            .mask
            .iter()
            .map(|&m| if m { 1.0 / valid } else { 0.0 })
            .collect();
        let per_gamma =
            |scale: f64, f: &dyn Fn(usize, usize) -> f64| -> Result<Tensor<S>, DiffError> {
                let data = (0..n * ng)
                    .map(|i| S::c(scale * w[i / ng] * f(i / ng, i % ng)))
                    .collect();
                Tensor::new(vec![n, ng], data)
            };
        let idx: Vec<usize> = (0..n * ng).map(|i| batch.actions[i / ng]).collect();

        // TD target, entirely from frozen heads on detached next states.
        let pi_next = Self::head(g, &self.heads.target_actor, next, &qshape)?;
        let pi_next = g.tape.softmax(pi_next, 2)?;
        let (sig, mu) = self.popart_tensors();
        let (sig, mu) = (g.constant(sig), g.constant(mu));
        let mut q_next = Vec::with_capacity(self.config.critics);
        for c in &self.heads.target_critics {
            let q = Self::head(g, c, next, &qshape)?;
            let q = g.tape.mul(q, sig)?;
            q_next.push(g.tape.add(q, mu)?);
        }
        let q_next = Self::clipped(g, &q_next, subsets)?;
        let v_next = g.tape.mul(pi_next, q_next)?;
        let v_next = g.tape.sum(v_next, Some(2))?;
        let v_next = g.value(v_next).data().to_vec();
        let gammas = self.config.gammas.gammas();
        let mut targets = vec![Vec::with_capacity(valid as usize); ng];
        let mut y = Vec::with_capacity(n * ng);
        for i in 0..n {
            for (gi, &gamma) in gammas.iter().enumerate() {
                let cont = if batch.dones[i] { 0.0 } else { 1.0 };
                let yu = batch.rewards[i] + gamma * cont * v_next[i * ng + gi].as_f64();
                if batch.mask[i] {
                    if !yu.is_finite() {
                        return Err(LearnerError::NonFiniteTarget { gamma_index: gi });
                    }
                    targets[gi].push(yu);
                }
                y.push(if batch.mask[i] {
                    S::c(self.popart[gi].normalize(yu))
                } else {
                    S::zero()
                });
            }
        }
        let y = g.constant(Tensor::new(vec![n, ng], y)?);

        // TD regression of every online critic.
        let td_w = g.constant(per_gamma(
            1.0 / (ng * self.config.critics) as f64,
            &|_, _| 1.0,
        )?);
        let mut q_online = Vec::with_capacity(self.config.critics);
        let mut td: Option<Var> = None;
        for c in &self.heads.critics {
            let q = Self::head(g, c, s, &qshape)?;
            q_online.push(q);
            let qsa = g.tape.gather(q, &idx)?;
            let diff = g.tape.sub(qsa, y)?;
            let sq = g.tape.square(diff);
            let term = g.tape.mul(sq, td_w)?;
            let term = g.tape.sum(term, None)?;
            td = Some(match td {
                Some(acc) => g.tape.add(acc, term)?,
                None => term,
            });
        }
        let td = td.expect("at least two critics");

        // Actor terms see the critics only through a detached, clipped copy.
        let detached: Vec<Var> = q_online.iter().map(|&q| g.tape.stop_gradient(q)).collect();
        let q_min = Self::clipped(g, &detached, subsets)?;
        let logits = Self::head(g, &self.heads.actor, s, &qshape)?;
        let pi = g.tape.softmax(logits, 2)?;
        let pq = g.tape.mul(pi, q_min)?;
        let pq = g.tape.sum(pq, Some(2))?;
        let pg_w = g.constant(per_gamma(-1.0 / ng as f64, &|_, _| 1.0)?);
        let pg = g.tape.mul(pq, pg_w)?;
        let pg = g.tape.sum(pg, None)?;

        let (piv, qv) = (g.value(pi).data().to_vec(), g.value(q_min).data().to_vec());
        let filter = |i: usize, gi: usize| {
            let row = (i * ng + gi) * na;
            let v: f64 = (0..na)
                .map(|a| piv[row + a].as_f64() * qv[row + a].as_f64())
                .sum();
            let adv = qv[row + batch.actions[i]].as_f64() - v;
            if adv > 0.0 {
                1.0
            } else {
                0.0
            }
        };
        let fbc_w = g.constant(per_gamma(-1.0 / ng as f64, &filter)?);
        let logp = g.tape.log(pi, S::c(PROB_FLOOR));
        let logp = g.tape.gather(logp, &idx)?;
        let fbc = g.tape.mul(logp, fbc_w)?;
        let fbc = g.tape.sum(fbc, None)?;

        Ok(LossTerms {
            td,
            pg,
            fbc,
            targets,
            attention_entropy: entropy,
        })
    }

    /// `λ0·TD + λ1·PG + λ2·FBC`, leaving zero-weight terms out of the graph.
    pub fn total_loss(
        &self,
        g: &mut Graph<'_, S>,
        terms: &LossTerms,
    ) -> Result<Option<Var>, LearnerError> {
        let w = self.config.weights;
        let mut total: Option<Var> = None;
        for (weight, term) in [(w.td, terms.td), (w.pg, terms.pg), (w.fbc, terms.fbc)] {
            if weight == 0.0 {
                continue;
            }
            let scaled = g.tape.scale(term, S::c(weight));
            total = Some(match total {
                Some(acc) => g.tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        Ok(total)
    }

    /// Loss values and raw per-parameter gradients for one batch, without touching any state.
    pub fn gradients(
        &self,
        batch: &LearnerBatch,
        subsets: &[Vec<usize>],
    ) -> Result<(UpdateMetrics, Vec<Option<Tensor<S>>>, Vec<Vec<f64>>), LearnerError> {
        let mut g = Graph::new(&self.store, true);
        let terms = self.losses(&mut g, batch, subsets)?;
        let (td, pg, fbc) = (
            g.value(terms.td).item().as_f64(),
            g.value(terms.pg).item().as_f64(),
            g.value(terms.fbc).item().as_f64(),
        );
        if !(td.is_finite() && pg.is_finite() && fbc.is_finite()) {
            return Err(LearnerError::NonFiniteLoss { td, pg, fbc });
        }
        let grads = match self.total_loss(&mut g, &terms)? {
            Some(total) => {
                let mut gr = g.tape.backward(total)?;
                g.param_grads(&mut gr)
            }
            None => vec![None; self.store.len()],
        };
        let metrics = UpdateMetrics {
            loss_td: td,
            loss_pg: pg,
            loss_fbc: fbc,
            grad_norm: global_norm(&grads),
            attn_entropy_mean: terms.attention_entropy,
        };
        Ok((metrics, grads, terms.targets))
    }

    /// One full training step: losses, clipped AdamW step, PopArt update and rescale, polyak.
    pub fn combined_update(
        &mut self,
        batch: &LearnerBatch,
        rng: &mut impl Rng,
    ) -> Result<UpdateMetrics, LearnerError> {
        self.encoder.refresh_spectral(&self.store);
        let subsets = self.draw_subsets(rng);
        let (metrics, mut grads, targets) = self.gradients(batch, &subsets)?;
        clip_global_norm(&mut grads, self.config.grad_clip);
        let w = self.config.weights;
        if w.td > 0.0 || w.pg > 0.0 || w.fbc > 0.0 {
            self.optimizer.apply(&mut self.store, &grads);
        }
        self.update_popart(&targets);
        polyak(&mut self.store, &self.heads.target_pairs(), self.config.tau);
        self.updates += 1;
        Ok(metrics)
    }

    /// Updates every γ's statistics and rescales the online and target critic output layers.
    pub fn update_popart(&mut self, targets: &[Vec<f64>]) {
        let na = self.action_count();
        for (gi, t) in targets.iter().enumerate() {
            let old = self.popart[gi].clone();
            self.popart[gi].update(t);
            let new = self.popart[gi].clone();
            for head in self.heads.critics.iter().chain(&self.heads.target_critics) {
                let last = head.layers.last().expect("critic has layers");
                popart_rescale(&mut self.store, last, gi * na..(gi + 1) * na, &old, &new);
            }
        }
    }

    /// Latent of the final frame, using at most the last `max_context` frames.
    pub fn latest_latent(&self, history: &[TimestepRecord]) -> Result<Tensor<S>, LearnerError> {
        let l = self.encoder.config.max_context;
        let window = &history[history.len().saturating_sub(l)..];
        let batch = TimestepBatch::from_sequences(&self.encoder.config, &[window])?;
        let mut g = Graph::new(&self.store, false);
        let out = self.encoder.forward(&mut g, &batch)?;
        let d = self.encoder.config.model_dim;
        let t = window.len();
        Ok(Tensor::new(
            vec![d],
            g.value(out.latents).data()[(t - 1) * d..t * d].to_vec(),
        )?)
    }

    /// Same as [`Self::latest_latent`], encoding only the rows not yet in `cache`.
    ///
    /// The cache must be cleared whenever parameters change or a new trajectory starts.
    /// Histories longer than the context fall back to a full sliding-window pass.
    pub fn latest_latent_cached(
        &self,
        history: &[TimestepRecord],
        cache: &mut KvCache<S>,
    ) -> Result<Tensor<S>, LearnerError> {
        if history.len() > self.encoder.config.max_context {
            cache.clear();
            return self.latest_latent(history);
        }
        if cache.len() >= history.len() {
            cache.clear();
        }
        let out = self
            .encoder
            .forward_cached(&self.store, &history[cache.len()..], cache)?;
        let d = self.encoder.config.model_dim;
        let m = out.shape()[0];
        Ok(Tensor::new(vec![d], out.data()[(m - 1) * d..].to_vec())?)
    }

    /// Action distribution of one γ head at a latent state.
    pub fn policy(&self, latent: &Tensor<S>, gamma_index: usize) -> Result<Vec<f64>, LearnerError> {
        let na = self.action_count();
        if gamma_index >= self.gamma_count() {
            return Err(LearnerError::Config(format!(
                "gamma index {gamma_index} out of {}",
                self.gamma_count()
            )));
        }
        let mut g = Graph::new(&self.store, false);
        let x = g.constant(latent.clone().reshaped(&[1, latent.numel()])?);
        let logits = self.heads.actor.forward(&mut g, x)?;
        let logits = g
            .tape
            .slice(logits, 1, gamma_index * na, (gamma_index + 1) * na)?;
        let p = g.tape.softmax(logits, 1)?;
        Ok(g.value(p).data().iter().map(|x| x.as_f64()).collect())
    }

    /// ε-greedy over a sample from the chosen γ head.
    pub fn select_action(
        &self,
        latent: &Tensor<S>,
        gamma_index: usize,
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<usize, LearnerError> {
        let probs = self.policy(latent, gamma_index)?;
        Ok(sample_epsilon(&probs, epsilon, rng))
    }

    /// Unnormalized `Q` of every critic at a latent: `[critic][γ·|A| + a]`.
    pub fn q_values(&self, latent: &Tensor<S>) -> Result<Vec<Vec<f64>>, LearnerError> {
        let na = self.action_count();
        let mut g = Graph::new(&self.store, false);
        let x = g.constant(latent.clone().reshaped(&[1, latent.numel()])?);
        let mut out = Vec::with_capacity(self.heads.critics.len());
        for c in &self.heads.critics {
            let q = c.forward(&mut g, x)?;
            out.push(
                g.value(q)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| self.popart[j / na].unnormalize(v.as_f64()))
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// With probability `ε` a uniform action, otherwise a draw from `probs`.
pub fn sample_epsilon(probs: &[f64], epsilon: f64, rng: &mut impl Rng) -> usize {
    if rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..probs.len());
    }
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

fn mean_entropy<S: Real>(maps: &[Tensor<S>], mask: &[bool]) -> Result<f64, EncoderError> {
    let mut all = Vec::new();
    for m in maps {
        all.extend(attention_entropy(m, Some(mask))?);
    }
    Ok(if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    })
}
