use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ReplayError;

/// A fixed-length tuple of goal tokens, e.g. `(type, location)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Goal(pub Vec<u32>);

impl Goal {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

/// Ordered goals; completing each in turn pays +1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    goals: Vec<Goal>,
}

impl Instruction {
    pub fn new(goals: Vec<Goal>) -> Result<Self, ReplayError> {
        if goals.is_empty() {
            return Err(ReplayError::Invalid(
                "instruction needs at least one goal".into(),
            ));
        }
        Ok(Self { goals })
    }

    /// The degenerate instruction of environments without goals.
    pub fn empty() -> Self {
        Self { goals: Vec::new() }
    }

    pub fn goals(&self) -> &[Goal] {
        &self.goals
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    /// Tokens padded with zeros to `max_goals × goal_len`.
    pub fn padded_tokens(&self, max_goals: usize, goal_len: usize) -> Vec<u32> {
        let mut out = vec![0; max_goals * goal_len];
        for (i, g) in self.goals.iter().take(max_goals).enumerate() {
            for (j, &tok) in g.0.iter().take(goal_len).enumerate() {
                out[i * goal_len + j] = tok;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalCounts {
    /// Timesteps at which the goal was achieved.
    pub timesteps: u64,
    /// Trajectories in which it was achieved at least once.
    pub episodes: u64,
}

/// Which frequency statistic a rarity score reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RarityStat {
    Timestep,
    Episode,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalFrequencyStats {
    pub counts: BTreeMap<Goal, GoalCounts>,
    pub episodes: u64,
}

impl GoalFrequencyStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one trajectory's achievement log into the counts.
    pub fn update(&mut self, achieved_log: &[Vec<Goal>]) {
        self.episodes += 1;
        let mut seen = std::collections::BTreeSet::new();
        for goals in achieved_log {
            for g in goals {
                self.counts.entry(g.clone()).or_default().timesteps += 1;
                seen.insert(g);
            }
        }
        for g in seen {
            self.counts.entry(g.clone()).or_default().episodes += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.episodes += other.episodes;
        for (g, c) in &other.counts {
            let e = self.counts.entry(g.clone()).or_default();
            e.timesteps += c.timesteps;
            e.episodes += c.episodes;
        }
    }

    pub fn count(&self, goal: &Goal, stat: RarityStat) -> u64 {
        self.counts.get(goal).map_or(0, |c| match stat {
            RarityStat::Timestep => c.timesteps,
            RarityStat::Episode => c.episodes,
        })
    }

    /// `1 / (1 + count)`.
    pub fn rarity(&self, goal: &Goal, stat: RarityStat) -> f64 {
        1.0 / (1.0 + self.count(goal, stat) as f64)
    }
}
