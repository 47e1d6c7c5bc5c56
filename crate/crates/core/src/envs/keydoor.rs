use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CmdpStep, Environment};
use crate::replay::Instruction;

/// Unit moves for actions 0 up, 1 right, 2 down, 3 left as `(dx, dy)`.
pub const MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// Multi-episode trial in a dark room: the key and door stay put for the whole trial,
/// the agent restarts at `(0, 0)` after each door visit or after `episode_len` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DarkKeyDoor {
    pub grid: usize,
    pub episode_len: usize,
    horizon: usize,
    pub key: (usize, usize),
    pub door: (usize, usize),
    pub pos: (usize, usize),
    pub has_key: bool,
    episode_t: usize,
    t: usize,
    reset: bool,
    pub doors: usize,
}

impl DarkKeyDoor {
    pub const START: (usize, usize) = (0, 0);

    pub fn new(seed: u64, grid: usize, episode_len: usize, horizon: usize) -> Self {
        assert!(grid >= 2, "grid must be at least 2x2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cell = || loop {
            let c = (rng.gen_range(0..grid), rng.gen_range(0..grid));
            if c != Self::START {
                return c;
            }
        };
        let key = cell();
        let door = loop {
            let d = cell();
            if d != key {
                break d;
            }
        };
        Self {
            grid,
            episode_len,
            horizon,
            key,
            door,
            pos: Self::START,
            has_key: false,
            episode_t: 0,
            t: 0,
            reset: true,
            doors: 0,
        }
    }

    fn obs(&self) -> Vec<f64> {
        let g = self.grid as f64;
        vec![
            self.pos.0 as f64 / g,
            self.pos.1 as f64 / g,
            if self.reset { 1.0 } else { 0.0 },
        ]
    }

    fn restart(&mut self) {
        self.pos = Self::START;
        self.has_key = false;
        self.episode_t = 0;
        self.reset = true;
    }
}

impl Environment for DarkKeyDoor {
    fn obs_dim(&self) -> usize {
        3
    }

    fn action_count(&self) -> usize {
        4
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
        let (dx, dy) = MOVES[action % 4];
        let max = self.grid as i64 - 1;
        self.pos = (
            (self.pos.0 as i64 + dx).clamp(0, max) as usize,
            (self.pos.1 as i64 + dy).clamp(0, max) as usize,
        );
        self.episode_t += 1;
        self.t += 1;
        self.reset = false;
        let mut reward = 0.0;
        if !self.has_key && self.pos == self.key {
            self.has_key = true;
            reward += 1.0;
        }
        if self.has_key && self.pos == self.door {
            reward += 1.0;
            self.doors += 1;
            self.restart();
        } else if self.episode_t >= self.episode_len {
            self.restart();
        }
        CmdpStep {
            observation: self.obs(),
            reward,
            terminal: false,
            truncated: self.t >= self.horizon,
            reset: self.reset,
            achieved: Vec::new(),
        }
    }

    fn succeeded(&self) -> bool {
        self.doors > 0
    }
}
