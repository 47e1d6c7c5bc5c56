//! Goal-conditioned environments behind one CMDP interface, plus the exploration schedule.

pub mod keydoor;
pub mod mazerunner;
pub mod package;
pub mod schedule;
pub mod tmaze;

pub use keydoor::DarkKeyDoor;
pub use mazerunner::{Maze, MazeRunner};
pub use package::PackageDelivery;
pub use schedule::{epsilon_at, EpsilonSchedule};
pub use tmaze::TMaze;

use serde::{Deserialize, Serialize};

use crate::replay::{Goal, Instruction, Step, Trajectory, TrajectoryShape};
use crate::trajencoder::TimestepRecord;

/// Goal type token for "reached this cell / location".
pub const GOAL_REACH: u32 = 1;
/// Goal type token for "delivered a package here".
pub const GOAL_DELIVER: u32 = 2;

/// Result of one environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct CmdpStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// The trial hit its horizon `H` without a terminal transition.
    pub truncated: bool,
    /// Set on the first observation of a new episode inside a multi-episode trial.
    pub reset: bool,
    pub achieved: Vec<Goal>,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Trial length `H` in timesteps.
    fn horizon(&self) -> usize;
    fn instruction(&self) -> Instruction;
    /// Initial observation.
    fn observe(&self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> CmdpStep;
    /// Task-specific success for the trial so far.
    fn succeeded(&self) -> bool;
}

/// Tracks progress through an instruction with replay pointer semantics.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct InstructionTracker {
    pub goals: Vec<Goal>,
    pub pointer: usize,
}

impl InstructionTracker {
    pub fn new(goals: Vec<Goal>) -> Self {
        Self { goals, pointer: 0 }
    }

    /// Reward for one row's achievements.
    pub fn advance(&mut self, achieved: &[Goal]) -> f64 {
        let mut unused: Vec<&Goal> = achieved.iter().collect();
        let mut reward = 0.0;
        while let Some(i) = self
            .goals
            .get(self.pointer)
            .and_then(|g| unused.iter().position(|u| *u == g))
        {
            unused.swap_remove(i);
            reward += 1.0;
            self.pointer += 1;
        }
        reward
    }

    pub fn complete(&self) -> bool {
        !self.goals.is_empty() && self.pointer == self.goals.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvSpec {
    TMaze {
        horizon: usize,
    },
    DarkKeyDoor {
        grid: usize,
        episode_len: usize,
        horizon: usize,
    },
    PackageDelivery {
        length: usize,
        horizon: usize,
    },
    MazeRunner {
        size: usize,
        horizon: usize,
        min_goals: usize,
        max_goals: usize,
        permute_actions: bool,
        include_xy: bool,
    },
}

impl EnvSpec {
    pub fn make(&self, seed: u64) -> Box<dyn Environment> {
        match *self {
            EnvSpec::TMaze { horizon } => Box::new(TMaze::new(seed, horizon)),
            EnvSpec::DarkKeyDoor {
                grid,
                episode_len,
                horizon,
            } => Box::new(DarkKeyDoor::new(seed, grid, episode_len, horizon)),
            EnvSpec::PackageDelivery { length, horizon } => {
                Box::new(PackageDelivery::new(seed, length, horizon))
            }
            EnvSpec::MazeRunner {
                size,
                horizon,
                min_goals,
                max_goals,
                permute_actions,
                include_xy,
            } => Box::new(MazeRunner::new(
                seed,
                size,
                horizon,
                min_goals,
                max_goals,
                permute_actions,
                include_xy,
            )),
        }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EnvSpec::TMaze { horizon }
            | EnvSpec::DarkKeyDoor { horizon, .. }
            | EnvSpec::PackageDelivery { horizon, .. }
            | EnvSpec::MazeRunner { horizon, .. } => horizon,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            EnvSpec::TMaze { .. }
            | EnvSpec::DarkKeyDoor { .. }
            | EnvSpec::PackageDelivery { .. } => 3,
            EnvSpec::MazeRunner { include_xy, .. } => 4 + if include_xy { 2 } else { 0 },
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvSpec::TMaze { .. } => 2,
            EnvSpec::DarkKeyDoor { .. } | EnvSpec::MazeRunner { .. } => 4,
            EnvSpec::PackageDelivery { .. } => 8,
        }
    }

    /// Longest instruction the environment can issue (at least 1 for the encoder's sake).
    pub fn max_goals(&self) -> usize {
        match *self {
            EnvSpec::TMaze { .. } | EnvSpec::DarkKeyDoor { .. } => 1,
            EnvSpec::PackageDelivery { .. } => package::MAX_GOALS,
            EnvSpec::MazeRunner { max_goals, .. } => max_goals,
        }
    }

    pub fn goal_len(&self) -> usize {
        2
    }

    /// Token vocabulary size including the padding id 0.
    pub fn vocab_size(&self) -> usize {
        match *self {
            EnvSpec::TMaze { .. } | EnvSpec::DarkKeyDoor { .. } => 3,
            EnvSpec::PackageDelivery { length, .. } => length + 3,
            EnvSpec::MazeRunner { size, .. } => size * size + 3,
        }
    }

    /// Whether instructions (and so relabeling) carry the reward.
    pub fn has_instructions(&self) -> bool {
        matches!(
            self,
            EnvSpec::PackageDelivery { .. } | EnvSpec::MazeRunner { .. }
        )
    }

    pub fn shape(&self) -> TrajectoryShape {
        TrajectoryShape {
            obs_dim: self.obs_dim(),
            action_count: self.action_count(),
            goal_len: self.goal_len(),
            max_goals: self.max_goals(),
        }
    }
}

/// One trial in progress, recorded in the unified CMDP format.
pub struct Rollout {
    env: Box<dyn Environment>,
    pub env_seed: u64,
    shape: TrajectoryShape,
    horizon: usize,
    instruction: Instruction,
    steps: Vec<Step>,
    records: Vec<TimestepRecord>,
    actions: Vec<usize>,
    finished: bool,
    success: bool,
}

impl Rollout {
    pub fn new(spec: &EnvSpec, env_seed: u64) -> Self {
        let env = spec.make(env_seed);
        let instruction = env.instruction();
        let first = Step {
            observation: env.observe().iter().map(|&x| x as f32).collect(),
            prev_action: None,
            prev_reward: 0.0,
            reset: true,
            time: 0.0,
            achieved: Vec::new(),
        };
        let mut r = Self {
            horizon: env.horizon(),
            env,
            env_seed,
            shape: spec.shape(),
            instruction,
            steps: Vec::new(),
            records: Vec::new(),
            actions: Vec::new(),
            finished: false,
            success: false,
        };
        r.push(first);
        r
    }

    /// Rebuilds a rollout by replaying `actions` from the seed.
    pub fn replay(spec: &EnvSpec, env_seed: u64, actions: &[usize]) -> Self {
        let mut r = Self::new(spec, env_seed);
        for &a in actions {
            r.step(a);
        }
        r
    }

    fn push(&mut self, step: Step) {
        let tokens = self
            .instruction
            .padded_tokens(self.shape.max_goals, self.shape.goal_len);
        self.records.push(TimestepRecord {
            observation: step.observation.iter().map(|&x| x as f64).collect(),
            prev_action: step.prev_action.map(|a| a as usize),
            prev_reward: step.prev_reward as f64,
            reset_flag: step.reset,
            time_feature: step.time as f64,
            instruction_tokens: tokens,
        });
        self.steps.push(step);
    }

    /// Applies an action; returns `true` once the trial has ended.
    pub fn step(&mut self, action: usize) -> bool {
        assert!(!self.finished, "step after the trial ended");
        let out = self.env.step(action);
        self.actions.push(action);
        let t = self.steps.len();
        self.push(Step {
            observation: out.observation.iter().map(|&x| x as f32).collect(),
            prev_action: Some(action as u32),
            prev_reward: out.reward as f32,
            reset: out.reset,
            time: (t as f64 / self.horizon as f64).min(1.0) as f32,
            achieved: out.achieved,
        });
        self.success = self.env.succeeded();
        if out.terminal || out.truncated || t >= self.horizon {
            self.finished = true;
        }
        self.finished
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Task success as judged by the environment.
    pub fn success(&self) -> bool {
        self.success
    }

    pub fn records(&self) -> &[TimestepRecord] {
        &self.records
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.prev_reward as f64).sum()
    }

    /// Return of each episode within the trial, split at reset rows.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for s in self.steps.iter().skip(1) {
            *out.last_mut().expect("non-empty") += s.prev_reward as f64;
            if s.reset {
                out.push(0.0);
            }
        }
        if self.finished && out.len() > 1 && self.steps.last().is_some_and(|s| s.reset) {
            out.pop();
        }
        out
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            shape: self.shape,
            env_seed: self.env_seed,
            id: 0,
            instruction: self.instruction,
            steps: self.steps,
        }
    }
}
