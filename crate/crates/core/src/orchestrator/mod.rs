//! Training loop: parallel collection alternating with gradient epochs, plus evaluation,
//! checkpoints and metrics.

mod config;
mod metrics;

pub use config::{parse_config, parse_config_str, ConfigError, ModelConfig, RunConfig, PRESETS};
pub use metrics::{MetricRecord, RecordKind};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{epsilon_at, EnvSpec, Rollout};
use crate::learner::{Agent, LearnerBatch, LearnerError, UpdateMetrics};
use crate::replay::{replay_rewards, BufferState, ReplayBuffer, ReplayError, Trajectory};
use crate::scalar::Real;
use crate::trajencoder::{KvCache, TimestepRecord};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BUFFER_DIR: &str = "buffer";
/// Environment variable capping the number of collection threads.
pub const THREADS_VAR: &str = "ICRL_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("actor {actor}: environment rewards disagree with the achievement log replay")]
    RewardMismatch { actor: usize },
    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        source: Box<OrchestratorError>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Independent 64-bit seed for a `(tag, a, b)` stream under the run seed.
pub fn derive_seed(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Worker count for collection: `ICRL_THREADS` if set, else the available cores, never more
/// than `jobs`.
pub fn thread_count(jobs: usize) -> usize {
    let cap = std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(jobs).max(1)
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(jobs))
        .build()
        .expect("thread pool builds")
}

/// A trial in progress, stored as its seed and action history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialTrial {
    pub env_seed: u64,
    pub jitter: f64,
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorState {
    /// Timesteps collected so far, which drives the ε anneal.
    pub steps: u64,
    pub partial: Option<PartialTrial>,
}

struct Actor {
    steps: u64,
    live: Option<(Rollout, f64)>,
}

impl Actor {
    fn snapshot(&self) -> ActorState {
        ActorState {
            steps: self.steps,
            partial: self.live.as_ref().map(|(r, j)| PartialTrial {
                env_seed: r.env_seed,
                jitter: *j,
                actions: r.actions().to_vec(),
            }),
        }
    }

    fn restore(spec: &EnvSpec, s: &ActorState) -> Self {
        Self {
            steps: s.steps,
            live: s
                .partial
                .as_ref()
                .map(|p| (Rollout::replay(spec, p.env_seed, &p.actions), p.jitter)),
        }
    }
}

/// A finished trial as reported by collection.
#[derive(Clone, Debug)]
pub struct FinishedTrial {
    pub trajectory: Trajectory,
    pub total_return: f64,
    pub success: bool,
    pub episode_returns: Vec<f64>,
}

struct ActorOutput {
    finished: Vec<FinishedTrial>,
    eps_sum: f64,
    steps: usize,
}

fn collect_actor<S: Real>(
    agent: &Agent<S>,
    config: &RunConfig,
    actor: &mut Actor,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ActorOutput, OrchestratorError> {
    let gamma = agent.config.gammas.selected();
    let h = config.horizon();
    let mut out = ActorOutput {
        finished: Vec::new(),
        eps_sum: 0.0,
        steps: 0,
    };
    // Parameters changed since the last call, so any carried-over trial is re-encoded.
    let mut cache = KvCache::default();
    for _ in 0..config.steps_per_actor() {
        if actor.live.is_none() {
            cache.clear();
            let seed = rng.gen::<u64>();
            let jitter = config.epsilon.draw_jitter(rng);
            actor.live = Some((Rollout::new(&config.env, seed), jitter));
        }
        let (rollout, jitter) = actor.live.as_mut().expect("live rollout");
        let t = rollout.records().len() - 1;
        let eps = epsilon_at(&config.epsilon, t, h, actor.steps, *jitter);
        let latent = agent.latest_latent_cached(rollout.records(), &mut cache)?;
        let action = agent.select_action(&latent, gamma, eps, rng)?;
        out.eps_sum += eps;
        out.steps += 1;
        actor.steps += 1;
        if rollout.step(action) {
            let (rollout, _) = actor.live.take().expect("live rollout");
            let check = rng.gen::<f64>() < config.reward_check_rate;
            out.finished.push(
                finish(rollout, check).ok_or(OrchestratorError::RewardMismatch { actor: index })?,
            );
        }
    }
    Ok(out)
}

/// Packages a finished rollout; `None` when the reward cross-check fails.
fn finish(rollout: Rollout, check: bool) -> Option<FinishedTrial> {
    let total_return = rollout.total_return();
    let success = rollout.success();
    let episode_returns = rollout.episode_returns();
    let trajectory = rollout.into_trajectory();
    if check && !trajectory.instruction.is_empty() {
        let replay = replay_rewards(&trajectory.achieved_log(), &trajectory.instruction);
        if trajectory
            .steps
            .iter()
            .zip(&replay.rewards)
            .any(|(s, r)| s.prev_reward != *r)
        {
            return None;
        }
    }
    Some(FinishedTrial {
        trajectory,
        total_return,
        success,
        episode_returns,
    })
}

/// Aggregates of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub updates: u64,
    pub trajectories: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub epsilon: f64,
    pub loss_td: Option<f64>,
    pub loss_pg: Option<f64>,
    pub loss_fbc: Option<f64>,
    pub grad_norm: Option<f64>,
    pub attn_entropy_mean: Option<f64>,
    pub buffer_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Checkpoint<S: Real> {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub config: RunConfig,
    pub agent: Agent<S>,
    pub buffer: BufferState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub actors: Vec<ActorState>,
}

impl<S: Real> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, OrchestratorError> {
        bincode::serialize(self).map_err(|e| OrchestratorError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OrchestratorError> {
        if bytes.len() < 4 {
            return Err(OrchestratorError::Checkpoint("file too short".into()));
        }
        let version = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(OrchestratorError::Checkpoint(format!(
                "version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let ck: Self = bincode::deserialize(bytes)
            .map_err(|e| OrchestratorError::Checkpoint(e.to_string()))?;
        if ck.config.hash() != ck.config_hash {
            return Err(OrchestratorError::Checkpoint(
                "stored config does not match its hash".into(),
            ));
        }
        Ok(ck)
    }

    pub fn read(path: &Path) -> Result<Self, OrchestratorError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Everything a run needs between epochs.
pub struct Trainer<S: Real> {
    pub config: RunConfig,
    pub agent: Agent<S>,
    pub buffer: ReplayBuffer,
    pub epoch: usize,
    rng: ChaCha8Rng,
    actors: Vec<Actor>,
    out_dir: PathBuf,
    metrics: Option<BufWriter<File>>,
    started: Instant,
}

impl<S: Real> Trainer<S> {
    /// Fresh run writing its buffer, metrics and checkpoints under `out_dir`.
    pub fn new(config: RunConfig, out_dir: &Path) -> Result<Self, OrchestratorError> {
        config.validate()?;
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0, 0));
        let agent = Agent::new(config.encoder_config(), config.learner.clone(), &mut init)?;
        let buffer_dir = out_dir.join(BUFFER_DIR);
        if buffer_dir.exists() {
            fs::remove_dir_all(&buffer_dir).map_err(io_err(&buffer_dir))?;
        }
        let buffer = ReplayBuffer::create(&buffer_dir, config.buffer_capacity, config.env.shape())?;
        let metrics_path = out_dir.join(METRICS_FILE);
        let metrics = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "learner", 0, 0)),
            actors: (0..config.actors)
                .map(|_| Actor {
                    steps: 0,
                    live: None,
                })
                .collect(),
            agent,
            buffer,
            epoch: 0,
            out_dir: out_dir.to_path_buf(),
            metrics: Some(BufWriter::new(metrics)),
            started: Instant::now(),
            config,
        })
    }

    /// Continues from a checkpoint. `config` must hash to the checkpoint's config hash; its
    /// epoch budget and reporting switches may differ.
    pub fn resume(
        config: RunConfig,
        out_dir: &Path,
        checkpoint: &Path,
    ) -> Result<Self, OrchestratorError> {
        let ck = Checkpoint::<S>::read(checkpoint)?;
        if ck.config_hash != config.hash() {
            return Err(OrchestratorError::Checkpoint(
                "config hash mismatch: the checkpoint was written by a different configuration"
                    .into(),
            ));
        }
        let buffer = ReplayBuffer::restore(out_dir.join(BUFFER_DIR), ck.buffer)?;
        let metrics_path = out_dir.join(METRICS_FILE);
        let metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(io_err(&metrics_path))?;
        Ok(Self {
            actors: ck
                .actors
                .iter()
                .map(|a| Actor::restore(&config.env, a))
                .collect(),
            agent: ck.agent,
            buffer,
            epoch: ck.epoch,
            rng: ck.rng,
            out_dir: out_dir.to_path_buf(),
            metrics: Some(BufWriter::new(metrics)),
            started: Instant::now(),
            config,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            agent: self.agent.clone(),
            buffer: self.buffer.state().clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            actors: self.actors.iter().map(Actor::snapshot).collect(),
        }
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), OrchestratorError> {
        let bytes = self.checkpoint().to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    fn wallclock(&self) -> f64 {
        if self.config.record_wallclock {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn write_record(&mut self, rec: &MetricRecord) -> Result<(), OrchestratorError> {
        if let Some(w) = self.metrics.as_mut() {
            let line = serde_json::to_string(rec).expect("record serializes");
            let path = self.out_dir.join(METRICS_FILE);
            writeln!(w, "{line}").map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Collection on every actor for `timesteps_per_actor` steps. Finished trials are appended
    /// to the buffer in actor order.
    pub fn collect(&mut self) -> Result<(Vec<FinishedTrial>, f64), OrchestratorError> {
        let (agent, config, epoch) = (&self.agent, &self.config, self.epoch as u64);
        let results: Vec<Result<ActorOutput, OrchestratorError>> =
            pool(self.actors.len()).install(|| {
                self.actors
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, actor)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            config.seed,
                            "actor",
                            i as u64,
                            epoch,
                        ));
                        collect_actor(agent, config, actor, i, &mut rng)
                    })
                    .collect()
            });
        let mut finished = Vec::new();
        let (mut eps, mut steps) = (0.0, 0usize);
        for r in results {
            let r = r?;
            eps += r.eps_sum;
            steps += r.steps;
            finished.extend(r.finished);
        }
        for f in &finished {
            self.buffer.append(f.trajectory.clone())?;
        }
        Ok((finished, if steps > 0 { eps / steps as f64 } else { 0.0 }))
    }

    /// Samples, relabels and windows one training batch.
    pub fn sample_learner_batch(&mut self) -> Result<LearnerBatch, OrchestratorError> {
        let trajs = self.buffer.sample_batch(
            self.config.batch_size,
            &self.config.relabel,
            &mut self.rng,
        )?;
        let enc = self.agent.encoder.config.clone();
        let l = enc.max_context;
        let mut windows: Vec<Vec<TimestepRecord>> = Vec::with_capacity(trajs.len());
        let mut terminal = Vec::with_capacity(trajs.len());
        for t in &trajs {
            let rec = t.records();
            let len = rec.len();
            let start = if len > l {
                self.rng.gen_range(0..=len - l)
            } else {
                0
            };
            let end = (start + l).min(len);
            terminal.push(end == len);
            windows.push(rec[start..end].to_vec());
        }
        let refs: Vec<&[TimestepRecord]> = windows.iter().map(|w| w.as_slice()).collect();
        Ok(LearnerBatch::from_sequences(&enc, &refs, &terminal)?)
    }

    /// One collection phase followed by `updates_per_epoch` updates.
    pub fn run_epoch(&mut self) -> Result<EpochSummary, OrchestratorError> {
        let epoch = self.epoch;
        self.run_epoch_inner()
            .map_err(|e| OrchestratorError::Epoch {
                epoch,
                source: Box::new(e),
            })
    }

    fn run_epoch_inner(&mut self) -> Result<EpochSummary, OrchestratorError> {
        let (finished, epsilon) = self.collect()?;
        let n = finished.len();
        let mean_return =
            (n > 0).then(|| finished.iter().map(|f| f.total_return).sum::<f64>() / n as f64);
        let success_rate =
            (n > 0).then(|| finished.iter().filter(|f| f.success).count() as f64 / n as f64);
        let mut all: Vec<UpdateMetrics> = Vec::new();
        if !self.buffer.is_empty() {
            for _ in 0..self.config.updates_per_epoch {
                let batch = self.sample_learner_batch()?;
                let m = self.agent.combined_update(&batch, &mut self.rng)?;
                let rec = MetricRecord {
                    kind: RecordKind::Update,
                    epoch: self.epoch,
                    update: self.agent.updates,
                    loss_td: Some(m.loss_td),
                    loss_pg: Some(m.loss_pg),
                    loss_fbc: Some(m.loss_fbc),
                    grad_norm: Some(m.grad_norm),
                    mean_return,
                    success_rate,
                    epsilon,
                    attn_entropy_mean: Some(m.attn_entropy_mean),
                    buffer_size: self.buffer.len(),
                    wallclock_s: self.wallclock(),
                };
                self.write_record(&rec)?;
                all.push(m);
            }
        }
        let avg = |f: fn(&UpdateMetrics) -> f64| {
            (!all.is_empty()).then(|| all.iter().map(f).sum::<f64>() / all.len() as f64)
        };
        let summary = EpochSummary {
            epoch: self.epoch,
            updates: self.agent.updates,
            trajectories: n,
            mean_return,
            success_rate,
            epsilon,
            loss_td: avg(|m| m.loss_td),
            loss_pg: avg(|m| m.loss_pg),
            loss_fbc: avg(|m| m.loss_fbc),
            grad_norm: avg(|m| m.grad_norm),
            attn_entropy_mean: avg(|m| m.attn_entropy_mean),
            buffer_size: self.buffer.len(),
        };
        let rec = MetricRecord::summary(&summary, self.wallclock());
        self.write_record(&rec)?;
        if let Some(w) = self.metrics.as_mut() {
            w.flush().map_err(io_err(&self.out_dir))?;
        }
        self.epoch += 1;
        if self.config.checkpoint_every > 0
            && self.epoch.is_multiple_of(self.config.checkpoint_every)
        {
            let path = self
                .out_dir
                .join(format!("checkpoint-{:05}.bin", self.epoch));
            self.save_checkpoint(&path)?;
        }
        Ok(summary)
    }

    /// Runs epochs until `config.epochs` have completed.
    pub fn train(
        &mut self,
        mut on_epoch: impl FnMut(&EpochSummary),
    ) -> Result<(), OrchestratorError> {
        while self.epoch < self.config.epochs {
            let s = self.run_epoch()?;
            on_epoch(&s);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub success_rate: f64,
    pub returns: Vec<f64>,
    /// Per-trial returns of each in-trial episode (multi-episode environments).
    pub episode_returns: Vec<Vec<f64>>,
}

/// Rollouts with no ε noise, sampling from the `gamma_index` policy head.
pub fn evaluate<S: Real>(
    agent: &Agent<S>,
    spec: &EnvSpec,
    episodes: usize,
    gamma_index: usize,
    seed: u64,
) -> Result<EvalReport, OrchestratorError> {
    let episodes = episodes.max(1);
    let trials: Vec<Result<(f64, bool, Vec<f64>), OrchestratorError>> =
        pool(episodes).install(|| {
            (0..episodes)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval", i as u64, 0));
                    let mut r = Rollout::new(spec, rng.gen());
                    let mut cache = KvCache::default();
                    loop {
                        let latent = agent.latest_latent_cached(r.records(), &mut cache)?;
                        let a = agent.select_action(&latent, gamma_index, 0.0, &mut rng)?;
                        if r.step(a) {
                            break;
                        }
                    }
                    Ok((r.total_return(), r.success(), r.episode_returns()))
                })
                .collect()
        });
    let mut report = EvalReport {
        mean_return: 0.0,
        success_rate: 0.0,
        returns: Vec::new(),
        episode_returns: Vec::new(),
    };
    let mut wins = 0;
    for t in trials {
        let (ret, success, eps) = t?;
        report.returns.push(ret);
        report.episode_returns.push(eps);
        wins += success as usize;
    }
    report.mean_return = report.returns.iter().sum::<f64>() / episodes as f64;
    report.success_rate = wins as f64 / episodes as f64;
    Ok(report)
}
