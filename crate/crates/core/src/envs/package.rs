use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CmdpStep, Environment, InstructionTracker, GOAL_DELIVER};
use crate::replay::{Goal, Instruction};

pub(crate) const MAX_GOALS: usize = 4;

pub const FORWARD: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;
pub const NOOP: usize = 3;
/// First of the four delivery candidates.
pub const DELIVER_BASE: usize = 4;

/// One-way road with forks. Packages must be dropped at the instructed locations in order.
#[derive(Clone, Debug, PartialEq)]
pub struct PackageDelivery {
    pub length: usize,
    horizon: usize,
    /// `(position, correct turn)` where the turn is `LEFT` or `RIGHT`.
    pub forks: Vec<(usize, usize)>,
    /// Action index in `4..8` that actually delivers.
    pub deliver_action: usize,
    pub budget: usize,
    pub remaining: usize,
    pub pos: usize,
    targets: Vec<usize>,
    tracker: InstructionTracker,
    t: usize,
}

pub fn delivery_goal(pos: usize) -> Goal {
    Goal(vec![GOAL_DELIVER, pos as u32 + 1])
}

impl PackageDelivery {
    pub fn new(seed: u64, length: usize, horizon: usize) -> Self {
        assert!(length >= 12, "road too short for forks and goals");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_forks = rng.gen_range(2..=6);
        let mut cells: Vec<usize> = (1..length).collect();
        cells.shuffle(&mut rng);
        let mut forks: Vec<(usize, usize)> = cells[..n_forks]
            .iter()
            .map(|&p| (p, if rng.gen_bool(0.5) { LEFT } else { RIGHT }))
            .collect();
        forks.sort_unstable();
        let mut free: Vec<usize> = (0..length)
            .filter(|p| !forks.iter().any(|f| f.0 == *p))
            .collect();
        free.shuffle(&mut rng);
        let k = rng.gen_range(2..=MAX_GOALS);
        let targets = free[..k].to_vec();
        let deliver_action = DELIVER_BASE + rng.gen_range(0..4);
        let tracker = InstructionTracker::new(targets.iter().map(|&p| delivery_goal(p)).collect());
        Self {
            length,
            horizon,
            forks,
            deliver_action,
            budget: 2 * k,
            remaining: 2 * k,
            pos: 0,
            targets,
            tracker,
            t: 0,
        }
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn fork_at(&self, pos: usize) -> Option<usize> {
        self.forks.iter().find(|f| f.0 == pos).map(|f| f.1)
    }

    fn obs(&self) -> Vec<f64> {
        vec![
            self.pos as f64 / self.length as f64,
            self.remaining as f64 / self.budget as f64,
            if self.fork_at(self.pos).is_some() {
                1.0
            } else {
                0.0
            },
        ]
    }
}

impl Environment for PackageDelivery {
    fn obs_dim(&self) -> usize {
        3
    }

    fn action_count(&self) -> usize {
        8
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn instruction(&self) -> Instruction {
        Instruction::new(self.tracker.goals.clone()).expect("at least two targets")
    }

    fn observe(&self) -> Vec<f64> {
        self.obs()
    }

    fn step(&mut self, action: usize) -> CmdpStep {
        self.t += 1;
        let mut achieved = Vec::new();
        match (action, self.fork_at(self.pos)) {
            (NOOP, _) => {}
            (a, _) if a >= DELIVER_BASE => {
                self.remaining = self.remaining.saturating_sub(1);
                if a == self.deliver_action {
                    achieved.push(delivery_goal(self.pos));
                }
            }
            (a, Some(turn)) => {
                self.pos = if a == turn { self.pos + 1 } else { 0 };
            }
            (FORWARD, None) => {
                self.pos = if self.pos + 1 >= self.length {
                    0
                } else {
                    self.pos + 1
                };
            }
            (_, None) => {}
        }
        if self.pos >= self.length {
            self.pos = 0;
        }
        let reward = self.tracker.advance(&achieved);
        let terminal = self.tracker.complete() || self.remaining == 0;
        CmdpStep {
            observation: self.obs(),
            reward,
            terminal,
            truncated: !terminal && self.t >= self.horizon,
            reset: false,
            achieved,
        }
    }

    fn succeeded(&self) -> bool {
        self.tracker.complete()
    }
}
