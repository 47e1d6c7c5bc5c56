use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Goal, GoalFrequencyStats, Instruction, RarityStat, Trajectory};

/// How alternative goals are chosen from a trajectory's achievements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Uniform,
    /// Only the `k` rarest distinct goals, weighted by rarity.
    RarityTopK(usize),
    /// Candidates at or above the median rarity, weighted by rarity.
    RarityAboveMedian,
    /// Candidates strictly rarer than the most common one (all if tied), weighted by rarity.
    RarityAboveMin,
    /// Only goals achieved at the last timestep that achieved anything.
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampling {
    pub mode: SamplingMode,
    pub stat: RarityStat,
}

/// Per-trajectory choice of relabeling scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RelabelStrategy {
    /// Uniform sampling with probability `uniform_prob`, otherwise one of the rarity modes.
    Mixed {
        uniform_prob: f64,
        top_k: usize,
    },
    Uniform,
    /// Fill every missing step with goals from the final achieving timestep.
    HerFinal,
}

impl Default for RelabelStrategy {
    fn default() -> Self {
        RelabelStrategy::Mixed {
            uniform_prob: 0.5,
            top_k: 5,
        }
    }
}

impl RelabelStrategy {
    pub fn draw(&self, rng: &mut impl Rng) -> Sampling {
        let stat = if rng.gen_bool(0.5) {
            RarityStat::Timestep
        } else {
            RarityStat::Episode
        };
        let mode = match *self {
            RelabelStrategy::Uniform => SamplingMode::Uniform,
            RelabelStrategy::HerFinal => SamplingMode::Final,
            RelabelStrategy::Mixed {
                uniform_prob,
                top_k,
            } => {
                if rng.gen::<f64>() < uniform_prob {
                    SamplingMode::Uniform
                } else {
                    match rng.gen_range(0..3) {
                        0 => SamplingMode::RarityTopK(top_k),
                        1 => SamplingMode::RarityAboveMedian,
                        _ => SamplingMode::RarityAboveMin,
                    }
                }
            }
        };
        Sampling { mode, stat }
    }
}

/// Result of replaying an instruction against an achievement log.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    /// Reward received on arriving at each row.
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub success: bool,
    /// Row at which each completed goal was achieved.
    pub completion_times: Vec<usize>,
}

impl Replay {
    pub fn completed(&self) -> usize {
        self.completion_times.len()
    }

    /// Index of the first done row.
    pub fn end(&self) -> usize {
        self.dones
            .iter()
            .position(|&d| d)
            .unwrap_or(self.dones.len().saturating_sub(1))
    }
}

/// Pointer semantics: at each row, while the pending goal is among that row's achievements,
/// pay +1 and advance. Each achievement completes at most one goal, so a repeated goal needs
/// another achievement. Done when the last goal completes, else at the final row. Row 0 holds
/// no reward.
pub fn replay_rewards(achieved_log: &[Vec<Goal>], instruction: &Instruction) -> Replay {
    let len = achieved_log.len();
    let goals = instruction.goals();
    let mut rewards = vec![0.0f32; len];
    let mut dones = vec![false; len];
    let mut times = Vec::new();
    let mut pointer = 0;
    for t in 1..len {
        if pointer == goals.len() {
            break;
        }
        let mut unused: Vec<&Goal> = achieved_log[t].iter().collect();
        while let Some(i) = goals
            .get(pointer)
            .and_then(|g| unused.iter().position(|u| *u == g))
        {
            unused.swap_remove(i);
            rewards[t] += 1.0;
            times.push(t);
            pointer += 1;
        }
        if pointer == goals.len() && !goals.is_empty() {
            dones[t] = true;
        }
    }
    let success = !goals.is_empty() && pointer == goals.len();
    if !success && len > 0 {
        dones[len - 1] = true;
    }
    Replay {
        rewards,
        dones,
        success,
        completion_times: times,
    }
}

/// Up to `h` `(row, goal)` picks at distinct rows, drawn without replacement. Achievements
/// already used by the completed steps of the current instruction are not candidates.
pub fn sample_alternative_goals(
    traj: &Trajectory,
    h: usize,
    stats: &GoalFrequencyStats,
    sampling: Sampling,
    rng: &mut impl Rng,
) -> Vec<(usize, Goal)> {
    let original = replay_rewards(&traj.achieved_log(), &traj.instruction);
    let mut cands: Vec<(usize, &Goal)> = Vec::new();
    for (t, step) in traj.steps.iter().enumerate().skip(1) {
        let mut free: Vec<&Goal> = step.achieved.iter().collect();
        for (&ct, g) in original
            .completion_times
            .iter()
            .zip(traj.instruction.goals())
        {
            if ct == t {
                if let Some(i) = free.iter().position(|f| *f == g) {
                    free.remove(i);
                }
            }
        }
        for (i, g) in free.iter().enumerate() {
            if !free[..i].contains(g) {
                cands.push((t, g));
            }
        }
    }
    let rarity = |g: &Goal| stats.rarity(g, sampling.stat);
    let mut weighted: Vec<(usize, &Goal, f64)> = match sampling.mode {
        SamplingMode::Uniform => cands.into_iter().map(|(t, g)| (t, g, 1.0)).collect(),
        SamplingMode::Final => {
            let last = cands.iter().map(|c| c.0).max();
            cands
                .into_iter()
                .filter(|c| Some(c.0) == last)
                .map(|(t, g)| (t, g, 1.0))
                .collect()
        }
        SamplingMode::RarityTopK(k) => {
            let mut distinct: Vec<&Goal> = cands.iter().map(|c| c.1).collect();
            distinct.sort();
            distinct.dedup();
            // rarest first; ties resolved by goal order for determinism
            distinct.sort_by(|a, b| rarity(b).total_cmp(&rarity(a)).then(a.cmp(b)));
            distinct.truncate(k);
            cands
                .into_iter()
                .filter(|c| distinct.contains(&c.1))
                .map(|(t, g)| (t, g, rarity(g)))
                .collect()
        }
        SamplingMode::RarityAboveMedian => {
            let mut r: Vec<f64> = cands.iter().map(|c| rarity(c.1)).collect();
            r.sort_by(f64::total_cmp);
            let median = if r.is_empty() {
                0.0
            } else {
                r[(r.len() - 1) / 2]
            };
            cands
                .into_iter()
                .map(|(t, g)| (t, g, rarity(g)))
                .filter(|c| c.2 >= median)
                .collect()
        }
        SamplingMode::RarityAboveMin => {
            let min = cands
                .iter()
                .map(|c| rarity(c.1))
                .fold(f64::INFINITY, f64::min);
            let all: Vec<_> = cands.into_iter().map(|(t, g)| (t, g, rarity(g))).collect();
            if all.iter().any(|c| c.2 > min) {
                all.into_iter().filter(|c| c.2 > min).collect()
            } else {
                all
            }
        }
    };
    let mut picks = Vec::with_capacity(h);
    while picks.len() < h && !weighted.is_empty() {
        let dist = WeightedIndex::new(weighted.iter().map(|c| c.2)).expect("positive weights");
        let (t, g, _) = weighted[dist.sample(rng)];
        picks.push((t, g.clone()));
        weighted.retain(|c| c.0 != t);
    }
    picks
}

/// Rebuilds `traj` around `instruction`: rewards replayed, rows past completion dropped.
pub fn apply_instruction(traj: &Trajectory, instruction: Instruction) -> Trajectory {
    let replay = replay_rewards(&traj.achieved_log(), &instruction);
    let end = replay.end();
    let mut out = traj.clone();
    out.instruction = instruction;
    out.steps.truncate(end + 1);
    for (s, r) in out.steps.iter_mut().zip(&replay.rewards) {
        s.prev_reward = *r;
    }
    out
}

/// Relabels with an explicit hindsight count `h` (clamped to `k − n`).
pub fn relabel_with_count(
    traj: &Trajectory,
    h: usize,
    sampling: Sampling,
    stats: &GoalFrequencyStats,
    rng: &mut impl Rng,
) -> Trajectory {
    if traj.instruction.is_empty() {
        return traj.clone();
    }
    let original = replay_rewards(&traj.achieved_log(), &traj.instruction);
    let n = original.completed();
    let k = traj.instruction.len();
    let h = h.min(k - n);
    let alts = sample_alternative_goals(traj, h, stats, sampling, rng);
    if n + alts.len() == 0 {
        return traj.clone();
    }
    let mut merged: Vec<(usize, Goal)> = alts;
    merged.extend(
        original
            .completion_times
            .iter()
            .zip(traj.instruction.goals())
            .map(|(&t, g)| (t, g.clone())),
    );
    merged.sort_by_key(|p| p.0);
    let instruction =
        Instruction::new(merged.into_iter().map(|p| p.1).collect()).expect("non-empty");
    apply_instruction(traj, instruction)
}

/// Algorithm: count completed steps `n`, draw `h` uniformly from `[0, k − n]`, insert `h`
/// achieved alternatives chronologically among the completed originals, replay rewards.
pub fn relabel(
    traj: &Trajectory,
    strategy: RelabelStrategy,
    stats: &GoalFrequencyStats,
    rng: &mut impl Rng,
) -> Trajectory {
    if traj.instruction.is_empty() {
        return traj.clone();
    }
    let n = replay_rewards(&traj.achieved_log(), &traj.instruction).completed();
    let room = traj.instruction.len() - n;
    let sampling = strategy.draw(rng);
    let h = match strategy {
        RelabelStrategy::HerFinal => room,
        _ => rng.gen_range(0..=room),
    };
    relabel_with_count(traj, h, sampling, stats, rng)
}
