use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{EnvSpec, EpsilonSchedule};
use crate::learner::{AdamWConfig, GammaSet, LearnerConfig};
use crate::replay::{RelabelConfig, RelabelStrategy};
use crate::trajencoder::{EncoderConfig, GoalEmbedKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Transformer and embedding sizes. Dimensions tied to the environment are filled in by
/// [`RunConfig::encoder_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub goal_embed: GoalEmbedKind,
    pub timestep_mlp: Vec<usize>,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Context length `l`; `None` covers the whole trial (`H + 1` rows).
    pub context: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub env: EnvSpec,
    pub seed: u64,
    pub model: ModelConfig,
    pub learner: LearnerConfig,
    pub buffer_capacity: usize,
    pub relabel: RelabelConfig,
    pub batch_size: usize,
    pub updates_per_epoch: usize,
    pub actors: usize,
    /// `None` means `H`.
    pub timesteps_per_actor: Option<usize>,
    pub epochs: usize,
    pub epsilon: EpsilonSchedule,
    pub eval_episodes: usize,
    /// Fraction of finished trajectories whose rewards are re-derived from their achievement log.
    pub reward_check_rate: f64,
    /// Write a numbered checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Real elapsed seconds in metrics; off keeps metric files reproducible.
    pub record_wallclock: bool,
}

pub const PRESETS: [&str; 5] = [
    "tmaze",
    "keydoor",
    "package",
    "mazerunner15",
    "mazerunner30",
];

fn learner(lr: f64, weight_decay: f64) -> LearnerConfig {
    LearnerConfig {
        optimizer: AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        },
        ..LearnerConfig::default()
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let ff_goals = GoalEmbedKind::FeedForward(vec![64, 32]);
        let no_goals = GoalEmbedKind::FeedForward(vec![8]);
        let model =
            |dim: usize, layers: usize, ts: Vec<usize>, goal_embed: GoalEmbedKind| ModelConfig {
                token_dim: 16,
                goal_embed,
                timestep_mlp: ts,
                model_dim: dim,
                ff_dim: 4 * dim,
                heads: 8,
                layers,
                context: None,
            };
        let base = |env: EnvSpec, model: ModelConfig, learner: LearnerConfig| RunConfig {
            preset: name.to_string(),
            env,
            seed: 0,
            model,
            learner,
            buffer_capacity: 20_000,
            relabel: RelabelConfig::default(),
            batch_size: 24,
            updates_per_epoch: 1000,
            actors: 12,
            timesteps_per_actor: None,
            epochs: 625,
            epsilon: EpsilonSchedule::default(),
            eval_episodes: 100,
            reward_check_rate: 0.01,
            checkpoint_every: 0,
            record_wallclock: false,
        };
        let maze = |size, horizon| {
            let mut c = base(
                EnvSpec::MazeRunner {
                    size,
                    horizon,
                    min_goals: 1,
                    max_goals: 3,
                    permute_actions: false,
                    include_xy: true,
                },
                model(128, 3, vec![128, 128, 128], ff_goals.clone()),
                learner(3e-4, 1e-4),
            );
            c.actors = 24;
            c.epochs = 600;
            c
        };
        Some(match name {
            "tmaze" => base(
                EnvSpec::TMaze { horizon: 64 },
                model(128, 2, vec![128, 128, 128], no_goals),
                learner(1e-4, 1e-3),
            ),
            "keydoor" => base(
                EnvSpec::DarkKeyDoor {
                    grid: 9,
                    episode_len: 50,
                    horizon: 500,
                },
                model(256, 3, vec![128, 128, 64], no_goals),
                learner(1e-4, 1e-3),
            ),
            "package" => {
                let mut c = base(
                    EnvSpec::PackageDelivery {
                        length: 30,
                        horizon: 180,
                    },
                    model(128, 3, vec![128, 128, 128], ff_goals),
                    learner(3e-4, 1e-4),
                );
                c.buffer_capacity = 15_000;
                c.updates_per_epoch = 1500;
                c.actors = 24;
                c.epochs = 600;
                c
            }
            "mazerunner15" => maze(15, 400),
            "mazerunner30" => maze(30, 1000),
            _ => return None,
        })
    }

    pub fn horizon(&self) -> usize {
        self.env.horizon()
    }

    pub fn steps_per_actor(&self) -> usize {
        self.timesteps_per_actor.unwrap_or_else(|| self.horizon())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            obs_dim: self.env.obs_dim(),
            action_count: self.env.action_count(),
            vocab_size: self.env.vocab_size(),
            max_goals: self.env.max_goals(),
            goal_len: self.env.goal_len(),
            token_dim: m.token_dim,
            goal_embed: m.goal_embed.clone(),
            timestep_mlp_dims: m.timestep_mlp.clone(),
            model_dim: m.model_dim,
            ff_dim: m.ff_dim,
            heads: m.heads,
            layers: m.layers,
            max_context: m.context.unwrap_or(self.horizon() + 1),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        for (name, v) in [
            ("buffer.capacity", self.buffer_capacity),
            ("train.batch_size", self.batch_size),
            ("train.actors", self.actors),
            ("train.timesteps_per_actor", self.steps_per_actor()),
            ("train.eval_episodes", self.eval_episodes),
            ("env.horizon", self.horizon()),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.relabel.probability)
            || !(0.0..=1.0).contains(&self.reward_check_rate)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.encoder_config().max_context < 2 {
            return bad("model.context must be at least 2");
        }
        self.encoder_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.learner
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let e = &self.epsilon;
        if [e.start_max, e.start_min, e.end_max, e.end_min]
            .iter()
            .any(|x| !(0.0..=1.0).contains(x))
            || e.jitter_low <= 0.0
            || e.jitter_high < e.jitter_low
        {
            return bad("exploration schedule out of range");
        }
        match self.env {
            EnvSpec::TMaze { horizon } if horizon < 3 => bad("T-Maze needs horizon >= 3"),
            EnvSpec::DarkKeyDoor {
                grid, episode_len, ..
            } if grid < 2 || episode_len == 0 => {
                bad("Key-Door needs grid >= 2 and episode_len >= 1")
            }
            EnvSpec::PackageDelivery { length, .. } if length < 12 => {
                bad("road length must be at least 12")
            }
            EnvSpec::MazeRunner {
                size,
                min_goals,
                max_goals,
                ..
            } if size < 5 || min_goals == 0 || min_goals > max_goals => {
                bad("MazeRunner needs size >= 5 and 1 <= min_goals <= max_goals")
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 over the settings that shape training, excluding the epoch budget and
    /// reporting switches so a run can be extended or resumed.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.epochs = 0;
        c.record_wallclock = false;
        c.checkpoint_every = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse()
        .map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn parse_u64(v: &str) -> Result<u64, String> {
    v.parse()
        .map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn parse_f64(v: &str) -> Result<f64, String> {
    let x: f64 = v
        .parse()
        .map_err(|_| format!("expected a number, got `{v}`"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got `{v}`"))
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list<T>(v: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected a list like [a,b], got `{v}`"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|x| item(x.trim())).collect()
}

fn parse_dims(v: &str) -> Result<Vec<usize>, String> {
    let dims = parse_list(v, parse_usize)?;
    if dims.is_empty() || dims.contains(&0) {
        return Err("dimensions must be a non-empty list of positive integers".into());
    }
    Ok(dims)
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

/// `key = value` pairs with their line numbers. `#` starts a comment.
fn lex(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let (k, v) = (k.trim(), unquote(v.trim()));
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: "empty key or value".into(),
            });
        }
        if let Some(first) = seen.insert(k.to_string(), line) {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("`{k}` already set on line {first}"),
            });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let pairs = lex(text)?;
    let preset = pairs.iter().find(|p| p.1 == "env");
    let mut cfg = match preset {
        Some((line, _, name)) => RunConfig::preset(name).ok_or_else(|| ConfigError::Value {
            line: *line,
            key: "env".into(),
            msg: format!(
                "unknown environment `{name}`; expected one of {}",
                PRESETS.join(", ")
            ),
        })?,
        None => return Err(ConfigError::Invalid("missing `env` key".into())),
    };
    let mut gamma_index = None;
    let mut goal_kind = None;
    let mut goal_dims = None;
    for (line, key, value) in pairs.iter().filter(|p| p.1 != "env") {
        let res = apply(
            &mut cfg,
            key,
            value,
            &mut gamma_index,
            &mut goal_kind,
            &mut goal_dims,
        );
        match res {
            Ok(true) => {}
            Ok(false) => {
                return Err(ConfigError::UnknownKey {
                    line: *line,
                    key: key.clone(),
                })
            }
            Err(msg) => {
                return Err(ConfigError::Value {
                    line: *line,
                    key: key.clone(),
                    msg,
                })
            }
        }
    }
    if goal_kind.is_some() || goal_dims.is_some() {
        let dims = match (&cfg.model.goal_embed, goal_dims) {
            (_, Some(d)) => d,
            (GoalEmbedKind::FeedForward(d), None) => d.clone(),
            (GoalEmbedKind::Recurrent { hidden, out }, None) => vec![*hidden, *out],
        };
        let kind = goal_kind.unwrap_or(match cfg.model.goal_embed {
            GoalEmbedKind::FeedForward(_) => "ff".to_string(),
            GoalEmbedKind::Recurrent { .. } => "rnn".to_string(),
        });
        cfg.model.goal_embed = match kind.as_str() {
            "ff" => GoalEmbedKind::FeedForward(dims),
            _ if dims.len() == 2 => GoalEmbedKind::Recurrent {
                hidden: dims[0],
                out: dims[1],
            },
            _ => {
                return Err(ConfigError::Invalid(
                    "recurrent goal embedding takes [hidden,out]".into(),
                ))
            }
        };
    }
    let selected = gamma_index.unwrap_or_else(|| cfg.learner.gammas.len() - 1);
    cfg.learner.gammas = cfg
        .learner
        .gammas
        .with_selected(selected)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

/// Sets one key. `Ok(false)` means the key is not recognized.
fn apply(
    cfg: &mut RunConfig,
    key: &str,
    v: &str,
    gamma_index: &mut Option<usize>,
    goal_kind: &mut Option<String>,
    goal_dims: &mut Option<Vec<usize>>,
) -> Result<bool, String> {
    let env_mismatch = || Err(format!("not a setting of the `{}` environment", cfg.preset));
    match key {
        "seed" => cfg.seed = parse_u64(v)?,
        "env.horizon" => {
            let h = parse_usize(v)?;
            match &mut cfg.env {
                EnvSpec::TMaze { horizon }
                | EnvSpec::DarkKeyDoor { horizon, .. }
                | EnvSpec::PackageDelivery { horizon, .. }
                | EnvSpec::MazeRunner { horizon, .. } => *horizon = h,
            }
        }
        "env.grid" => match &mut cfg.env {
            EnvSpec::DarkKeyDoor { grid, .. } => *grid = parse_usize(v)?,
            _ => return env_mismatch(),
        },
        "env.episode_len" => match &mut cfg.env {
            EnvSpec::DarkKeyDoor { episode_len, .. } => *episode_len = parse_usize(v)?,
            _ => return env_mismatch(),
        },
        "env.length" => match &mut cfg.env {
            EnvSpec::PackageDelivery { length, .. } => *length = parse_usize(v)?,
            _ => return env_mismatch(),
        },
        "env.size" => match &mut cfg.env {
            EnvSpec::MazeRunner { size, .. } => *size = parse_usize(v)?,
            _ => return env_mismatch(),
        },
        "env.min_goals" | "env.max_goals" | "env.permute_actions" | "env.include_xy" => {
            match &mut cfg.env {
                EnvSpec::MazeRunner {
                    min_goals,
                    max_goals,
                    permute_actions,
                    include_xy,
                    ..
                } => match key {
                    "env.min_goals" => *min_goals = parse_usize(v)?,
                    "env.max_goals" => *max_goals = parse_usize(v)?,
                    "env.permute_actions" => *permute_actions = parse_bool(v)?,
                    _ => *include_xy = parse_bool(v)?,
                },
                _ => return env_mismatch(),
            }
        }
        "model.token_dim" => cfg.model.token_dim = parse_usize(v)?,
        "model.goal_embed" => match v {
            "ff" | "rnn" => *goal_kind = Some(v.to_string()),
            _ => return Err(format!("expected ff or rnn, got `{v}`")),
        },
        "model.goal_embed_dims" => *goal_dims = Some(parse_dims(v)?),
        "model.timestep_mlp" => cfg.model.timestep_mlp = parse_dims(v)?,
        "model.dim" => cfg.model.model_dim = parse_usize(v)?,
        "model.ff_dim" => cfg.model.ff_dim = parse_usize(v)?,
        "model.heads" => cfg.model.heads = parse_usize(v)?,
        "model.layers" => cfg.model.layers = parse_usize(v)?,
        "model.context" => cfg.model.context = Some(parse_usize(v)?),
        "learner.gamma_set" => {
            let gammas = parse_list(v, parse_f64)?;
            let n = gammas.len();
            cfg.learner.gammas =
                GammaSet::new(gammas, n.saturating_sub(1)).map_err(|e| e.to_string())?;
        }
        "learner.gamma_index" => *gamma_index = Some(parse_usize(v)?),
        "learner.critics" => {
            let n = parse_usize(v)?;
            if n < 2 {
                return Err("the critic ensemble needs at least 2 members".into());
            }
            cfg.learner.critics = n;
        }
        "learner.clipped_critics" => cfg.learner.clipped_critics = parse_usize(v)?,
        "learner.lr" => cfg.learner.optimizer.lr = parse_f64(v)?,
        "learner.weight_decay" => cfg.learner.optimizer.weight_decay = parse_f64(v)?,
        "learner.tau" => cfg.learner.tau = parse_f64(v)?,
        "learner.grad_clip" => cfg.learner.grad_clip = parse_f64(v)?,
        "learner.td_weight" => cfg.learner.weights.td = parse_f64(v)?,
        "learner.pg_weight" => cfg.learner.weights.pg = parse_f64(v)?,
        "learner.fbc_weight" => cfg.learner.weights.fbc = parse_f64(v)?,
        "learner.popart_beta" => cfg.learner.popart_beta = parse_f64(v)?,
        "learner.actor_dims" => cfg.learner.actor_dims = parse_dims(v)?,
        "learner.critic_dims" => cfg.learner.critic_dims = parse_dims(v)?,
        "buffer.capacity" => cfg.buffer_capacity = parse_usize(v)?,
        "buffer.relabel_prob" => cfg.relabel.probability = parse_f64(v)?,
        "buffer.strategy" => {
            cfg.relabel.strategy = match v {
                "mixed" => RelabelStrategy::default(),
                "uniform" => RelabelStrategy::Uniform,
                "her" => RelabelStrategy::HerFinal,
                _ => return Err(format!("expected mixed, uniform or her, got `{v}`")),
            }
        }
        "buffer.uniform_prob" | "buffer.top_k" => match &mut cfg.relabel.strategy {
            RelabelStrategy::Mixed {
                uniform_prob,
                top_k,
            } => {
                if key == "buffer.top_k" {
                    *top_k = parse_usize(v)?;
                } else {
                    *uniform_prob = parse_f64(v)?;
                }
            }
            _ => return Err("only valid with buffer.strategy = mixed".into()),
        },
        "train.batch_size" => cfg.batch_size = parse_usize(v)?,
        "train.updates_per_epoch" => cfg.updates_per_epoch = parse_usize(v)?,
        "train.actors" => cfg.actors = parse_usize(v)?,
        "train.timesteps_per_actor" => cfg.timesteps_per_actor = Some(parse_usize(v)?),
        "train.epochs" => cfg.epochs = parse_usize(v)?,
        "train.eval_episodes" => cfg.eval_episodes = parse_usize(v)?,
        "train.reward_check_rate" => cfg.reward_check_rate = parse_f64(v)?,
        "train.checkpoint_every" => cfg.checkpoint_every = parse_usize(v)?,
        "train.record_wallclock" => cfg.record_wallclock = parse_bool(v)?,
        "explore.start_max" => cfg.epsilon.start_max = parse_f64(v)?,
        "explore.start_min" => cfg.epsilon.start_min = parse_f64(v)?,
        "explore.end_max" => cfg.epsilon.end_max = parse_f64(v)?,
        "explore.end_min" => cfg.epsilon.end_min = parse_f64(v)?,
        "explore.anneal_steps" => cfg.epsilon.anneal_steps = parse_u64(v)?,
        "explore.jitter_low" => cfg.epsilon.jitter_low = parse_f64(v)?,
        "explore.jitter_high" => cfg.epsilon.jitter_high = parse_f64(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}
