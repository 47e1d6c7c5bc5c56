use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::keydoor::MOVES;
use super::{CmdpStep, Environment, InstructionTracker, GOAL_REACH};
use crate::replay::{Goal, Instruction};

/// Square grid of walls, indexed `(row, col)` with row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Maze {
    pub size: usize,
    walls: Vec<bool>,
}

impl Maze {
    /// Builds from rows of `'#'` (wall) and `'.'` (free).
    pub fn from_rows(rows: &[&str]) -> Self {
        let size = rows.len();
        let mut walls = Vec::with_capacity(size * size);
        for r in rows {
            assert_eq!(r.len(), size, "maze must be square");
            walls.extend(r.chars().map(|c| c == '#'));
        }
        Self { size, walls }
    }

    /// Recursive backtracker on the odd cells of a `(2⌊N/2⌋+1)²` grid, cropped to `N×N`,
    /// with the spawn corridor and tunnel written over the bottom three rows.
    /// Cells not reachable from the spawn afterwards become walls.
    pub fn generate(size: usize, rng: &mut impl Rng) -> Self {
        assert!(size >= 5, "maze size must be at least 5");
        let full = 2 * (size / 2) + 1;
        let mut grid = vec![true; full * full];
        let cells = full / 2;
        let mut visited = vec![false; cells * cells];
        let mut stack = vec![(0usize, 0usize)];
        visited[0] = true;
        grid[full + 1] = false;
        while let Some(&(r, c)) = stack.last() {
            let mut next = Vec::with_capacity(4);
            if r > 0 && !visited[(r - 1) * cells + c] {
                next.push((r - 1, c));
            }
            if c + 1 < cells && !visited[r * cells + c + 1] {
                next.push((r, c + 1));
            }
            if r + 1 < cells && !visited[(r + 1) * cells + c] {
                next.push((r + 1, c));
            }
            if c > 0 && !visited[r * cells + c - 1] {
                next.push((r, c - 1));
            }
            match next.choose(rng) {
                None => {
                    stack.pop();
                }
                Some(&(nr, nc)) => {
                    visited[nr * cells + nc] = true;
                    grid[(2 * nr + 1) * full + 2 * nc + 1] = false;
                    grid[(r + nr + 1) * full + c + nc + 1] = false;
                    stack.push((nr, nc));
                }
            }
        }
        let mut walls: Vec<bool> = (0..size)
            .flat_map(|r| (0..size).map(move |c| (r, c)))
            .map(|(r, c)| grid[r * full + c])
            .collect();
        let center = size / 2;
        for c in 0..size {
            walls[(size - 3) * size + c] = false;
            walls[(size - 2) * size + c] = c != center;
            walls[(size - 1) * size + c] = c != center;
        }
        let mut maze = Self { size, walls };
        let reach = maze.reachable(maze.spawn());
        for (i, w) in maze.walls.iter_mut().enumerate() {
            if !reach[i] {
                *w = true;
            }
        }
        maze
    }

    pub fn spawn(&self) -> (usize, usize) {
        (self.size - 1, self.size / 2)
    }

    pub fn is_wall(&self, r: i64, c: i64) -> bool {
        let n = self.size as i64;
        r < 0 || c < 0 || r >= n || c >= n || self.walls[(r * n + c) as usize]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.size * self.size)
            .filter(|&i| !self.walls[i])
            .map(|i| (i / self.size, i % self.size))
            .collect()
    }

    /// BFS reachability mask from `from`.
    pub fn reachable(&self, from: (usize, usize)) -> Vec<bool> {
        let n = self.size;
        let mut seen = vec![false; n * n];
        if self.is_wall(from.0 as i64, from.1 as i64) {
            return seen;
        }
        let mut queue = VecDeque::from([from]);
        seen[from.0 * n + from.1] = true;
        while let Some((r, c)) = queue.pop_front() {
            for (dc, dr) in MOVES {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if !self.is_wall(nr, nc) && !seen[nr as usize * n + nc as usize] {
                    seen[nr as usize * n + nc as usize] = true;
                    queue.push_back((nr as usize, nc as usize));
                }
            }
        }
        seen
    }

    /// Free cells in each direction (up, right, down, left) before a wall or the edge, divided by `N`.
    pub fn depths(&self, pos: (usize, usize)) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (i, (dc, dr)) in MOVES.iter().enumerate() {
            let (mut r, mut c, mut n) = (pos.0 as i64, pos.1 as i64, 0usize);
            while !self.is_wall(r + dr, c + dc) {
                r += dr;
                c += dc;
                n += 1;
            }
            out[i] = n as f64 / self.size as f64;
        }
        out
    }
}

pub fn cell_goal(size: usize, cell: (usize, usize)) -> Goal {
    Goal(vec![GOAL_REACH, (cell.0 * size + cell.1) as u32 + 1])
}

/// Navigate a procedurally generated maze to a sequence of cells using depth sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct MazeRunner {
    pub maze: Maze,
    horizon: usize,
    /// `permutation[a]` is the canonical move (0 up, 1 right, 2 down, 3 left) for action `a`.
    pub permutation: [usize; 4],
    include_xy: bool,
    pub pos: (usize, usize),
    pub targets: Vec<(usize, usize)>,
    tracker: InstructionTracker,
    t: usize,
}

impl MazeRunner {
    pub fn new(
        seed: u64,
        size: usize,
        horizon: usize,
        min_goals: usize,
        max_goals: usize,
        permute_actions: bool,
        include_xy: bool,
    ) -> Self {
        assert!(
            1 <= min_goals && min_goals <= max_goals,
            "invalid goal count range"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maze = Maze::generate(size, &mut rng);
        let spawn = maze.spawn();
        let mut free: Vec<(usize, usize)> = maze
            .free_cells()
            .into_iter()
            .filter(|&c| c != spawn)
            .collect();
        free.shuffle(&mut rng);
        let k = rng.gen_range(min_goals..=max_goals).min(free.len());
        let targets = free[..k].to_vec();
        let mut permutation = [0, 1, 2, 3];
        if permute_actions {
            permutation.shuffle(&mut rng);
        }
        let tracker =
            InstructionTracker::new(targets.iter().map(|&c| cell_goal(size, c)).collect());
        Self {
            maze,
            horizon,
            permutation,
            include_xy,
            pos: spawn,
            targets,
            tracker,
            t: 0,
        }
    }

    pub fn from_maze(
        maze: Maze,
        horizon: usize,
        targets: Vec<(usize, usize)>,
        include_xy: bool,
    ) -> Self {
        let tracker =
            InstructionTracker::new(targets.iter().map(|&c| cell_goal(maze.size, c)).collect());
        Self {
            pos: maze.spawn(),
            maze,
            horizon,
            permutation: [0, 1, 2, 3],
            include_xy,
            targets,
            tracker,
            t: 0,
        }
    }

    fn obs(&self) -> Vec<f64> {
        let mut out = self.maze.depths(self.pos).to_vec();
        if self.include_xy {
            let n = self.maze.size as f64;
            out.push(self.pos.1 as f64 / n);
            out.push(self.pos.0 as f64 / n);
        }
        out
    }
}

impl Environment for MazeRunner {
    fn obs_dim(&self) -> usize {
        4 + if self.include_xy { 2 } else { 0 }
    }

    fn action_count(&self) -> usize {
        4
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn instruction(&self) -> Instruction {
        Instruction::new(self.tracker.goals.clone()).unwrap_or_else(|_| Instruction::empty())
    }

    fn observe(&self) -> Vec<f64> {
        self.obs()
    }

    fn step(&mut self, action: usize) -> CmdpStep {
        self.t += 1;
        let (dc, dr) = MOVES[self.permutation[action % 4]];
        let (nr, nc) = (self.pos.0 as i64 + dr, self.pos.1 as i64 + dc);
        if !self.maze.is_wall(nr, nc) {
            self.pos = (nr as usize, nc as usize);
        }
        let achieved = vec![cell_goal(self.maze.size, self.pos)];
        let reward = self.tracker.advance(&achieved);
        let terminal = self.tracker.complete();
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
