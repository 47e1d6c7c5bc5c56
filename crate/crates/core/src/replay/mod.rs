//! Disk-backed trajectory storage and hindsight instruction relabeling.

mod buffer;
mod goal;
mod relabel;
mod trajectory;

pub use buffer::{trajectory_file_name, BufferState, RelabelConfig, ReplayBuffer};
pub use goal::{Goal, GoalCounts, GoalFrequencyStats, Instruction, RarityStat};
pub use relabel::{
    apply_instruction, relabel, relabel_with_count, replay_rewards, sample_alternative_goals,
    RelabelStrategy, Replay, Sampling, SamplingMode,
};
pub use trajectory::{Step, Trajectory, TrajectoryShape, FORMAT_VERSION, MAGIC, NO_ACTION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("corrupt trajectory file: {0}")]
    Corrupt(String),
    #[error("replay buffer is empty")]
    Empty,
}
