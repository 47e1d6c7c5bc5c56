use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CmdpStep, Environment};
use crate::replay::Instruction;

pub const UP: usize = 0;
pub const DOWN: usize = 1;

/// Passive memory task: the cue is visible only at `t = 0`, the decision is made at the
/// junction at `t = H − 1`. The corridor advances one cell per step whatever the action.
#[derive(Clone, Debug, PartialEq)]
pub struct TMaze {
    horizon: usize,
    /// `+1` means up is correct, `−1` means down.
    pub cue: f64,
    t: usize,
    correct: bool,
}

impl TMaze {
    pub fn new(seed: u64, horizon: usize) -> Self {
        assert!(horizon >= 3, "corridor needs at least one cell");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cue = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            horizon,
            cue,
            t: 0,
            correct: false,
        }
    }

    pub fn corridor_len(&self) -> usize {
        self.horizon - 2
    }

    fn obs(&self) -> Vec<f64> {
        let at_junction = if self.t == self.horizon - 1 { 1.0 } else { 0.0 };
        let cue = if self.t == 0 { self.cue } else { 0.0 };
        vec![
            (self.t.min(self.horizon - 1)) as f64 / self.horizon as f64,
            at_junction,
            cue,
        ]
    }
}

impl Environment for TMaze {
    fn obs_dim(&self) -> usize {
        3
    }

    fn action_count(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn instruction(&self) -> Instruction {
        Instruction::empty()
    }

    fn observe(&self) -> Vec<f64> {
        self.obs()
    }

    fn step(&mut self, action: usize) -> CmdpStep {
        let decision = self.t == self.horizon - 1;
        self.t += 1;
        let reward = if decision {
            let choice = if action == UP { 1.0 } else { -1.0 };
            if choice == self.cue {
                self.correct = true;
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        CmdpStep {
            observation: self.obs(),
            reward,
            terminal: decision,
            truncated: false,
            reset: false,
            achieved: Vec::new(),
        }
    }

    fn succeeded(&self) -> bool {
        self.correct
    }
}
