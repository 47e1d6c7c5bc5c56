use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    relabel, GoalFrequencyStats, RelabelStrategy, ReplayError, Trajectory, TrajectoryShape,
};

/// Relabeling applied to sampled trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelConfig {
    /// Probability that a draw is relabeled at all.
    pub probability: f64,
    pub strategy: RelabelStrategy,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            probability: 1.0,
            strategy: RelabelStrategy::default(),
        }
    }
}

/// Index state persisted in checkpoints; the trajectory files stay on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferState {
    pub capacity: usize,
    pub shape: TrajectoryShape,
    pub index: VecDeque<u64>,
    pub next_id: u64,
    pub stats: GoalFrequencyStats,
}

/// FIFO store of whole trajectories, one file each, named by zero-padded id.
#[derive(Debug)]
pub struct ReplayBuffer {
    dir: PathBuf,
    state: BufferState,
}

pub fn trajectory_file_name(id: u64) -> String {
    format!("{id:010}")
}

impl ReplayBuffer {
    pub fn create(
        dir: impl AsRef<Path>,
        capacity: usize,
        shape: TrajectoryShape,
    ) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Invalid(
                "buffer capacity must be positive".into(),
            ));
        }
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let state = BufferState {
            capacity,
            shape,
            index: VecDeque::new(),
            next_id: 0,
            stats: GoalFrequencyStats::new(),
        };
        Ok(Self { dir, state })
    }

    /// Reattaches to files written earlier; every indexed file must exist.
    pub fn restore(dir: impl AsRef<Path>, state: BufferState) -> Result<Self, ReplayError> {
        let dir = dir.as_ref().to_path_buf();
        for &id in &state.index {
            if !dir.join(trajectory_file_name(id)).is_file() {
                return Err(ReplayError::Invalid(format!(
                    "missing trajectory file {}",
                    trajectory_file_name(id)
                )));
            }
        }
        Ok(Self { dir, state })
    }

    pub fn state(&self) -> &BufferState {
        &self.state
    }

    pub fn stats(&self) -> &GoalFrequencyStats {
        &self.state.stats
    }

    pub fn len(&self) -> usize {
        self.state.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.index.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.state.index.iter().copied()
    }

    pub fn path(&self, id: u64) -> PathBuf {
        self.dir.join(trajectory_file_name(id))
    }

    /// Writes the trajectory under the next id, evicting the oldest file when full.
    pub fn append(&mut self, mut traj: Trajectory) -> Result<u64, ReplayError> {
        if traj.shape != self.state.shape {
            return Err(ReplayError::Invalid(
                "trajectory shape differs from buffer shape".into(),
            ));
        }
        let id = self.state.next_id;
        traj.id = id;
        let bytes = traj.encode()?;
        let tmp = self.dir.join(format!(".{}.tmp", trajectory_file_name(id)));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, self.path(id))?;
        self.state.next_id += 1;
        self.state.index.push_back(id);
        self.state.stats.update(&traj.achieved_log());
        while self.state.index.len() > self.state.capacity {
            let old = self.state.index.pop_front().expect("non-empty");
            fs::remove_file(self.path(old))?;
        }
        Ok(id)
    }

    pub fn load(&self, id: u64) -> Result<Trajectory, ReplayError> {
        let bytes = fs::read(self.path(id))?;
        Trajectory::decode(&bytes, id)
    }

    /// `n` uniform draws with replacement, each relabeled independently.
    pub fn sample_batch(
        &self,
        n: usize,
        relabel_cfg: &RelabelConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<Trajectory>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let id = self.state.index[rng.gen_range(0..self.len())];
            let traj = self.load(id)?;
            if rng.gen::<f64>() < relabel_cfg.probability {
                out.push(relabel(&traj, relabel_cfg.strategy, &self.state.stats, rng));
            } else {
                out.push(traj);
            }
        }
        Ok(out)
    }
}
