#![allow(dead_code)]

use icrl_core::replay::{Goal, Instruction, Step, Trajectory, TrajectoryShape};
use rand::Rng;

pub const GOAL_LEN: usize = 2;

pub fn goal(kind: u32) -> Goal {
    Goal(vec![kind, 1])
}

pub fn toy_shape(max_goals: usize) -> TrajectoryShape {
    TrajectoryShape {
        obs_dim: 1,
        action_count: 2,
        goal_len: GOAL_LEN,
        max_goals,
    }
}

/// A trajectory whose only content is its achievement log.
pub fn toy_trajectory(
    log: Vec<Vec<Goal>>,
    instruction: Instruction,
    max_goals: usize,
) -> Trajectory {
    let len = log.len();
    let mut traj = Trajectory {
        shape: toy_shape(max_goals),
        env_seed: 0,
        id: 0,
        instruction,
        steps: log
            .into_iter()
            .enumerate()
            .map(|(t, achieved)| Step {
                observation: vec![t as f32],
                prev_action: (t > 0).then_some((t % 2) as u32),
                prev_reward: 0.0,
                reset: t == 0,
                time: t as f32 / (len - 1).max(1) as f32,
                achieved,
            })
            .collect(),
    };
    let rewards = oracle_rewards(&traj.achieved_log(), traj.instruction.goals());
    let end = rewards.1;
    traj.steps.truncate(end + 1);
    for (s, r) in traj.steps.iter_mut().zip(rewards.0) {
        s.prev_reward = r;
    }
    traj
}

/// Random 10-row log over goal kinds 1..=4 and a random instruction of 1..=max_goals goals.
pub fn random_toy(rng: &mut impl Rng, max_goals: usize) -> Trajectory {
    let log: Vec<Vec<Goal>> = (0..10)
        .map(|t| {
            if t == 0 {
                return Vec::new();
            }
            let n = rng.gen_range(0..=2);
            let mut v: Vec<Goal> = (0..n).map(|_| goal(rng.gen_range(1..=4))).collect();
            v.dedup();
            v
        })
        .collect();
    let k = rng.gen_range(1..=max_goals);
    let instr = Instruction::new((0..k).map(|_| goal(rng.gen_range(1..=5))).collect()).unwrap();
    toy_trajectory(log, instr, max_goals)
}

/// Independent reward oracle: each goal completes at the earliest row not before the previous
/// completion that still has an unused achievement of it. Returns per-row rewards, the last
/// kept row, and completion rows.
pub fn oracle_rewards(log: &[Vec<Goal>], goals: &[Goal]) -> (Vec<f32>, usize, Vec<usize>) {
    let mut times = Vec::new();
    let mut used: Vec<Vec<Goal>> = vec![Vec::new(); log.len()];
    let mut from = 1;
    let remaining = |t: usize, g: &Goal, used: &Vec<Vec<Goal>>| {
        log[t].iter().filter(|x| *x == g).count() > used[t].iter().filter(|x| *x == g).count()
    };
    for g in goals {
        match (from..log.len()).find(|&t| remaining(t, g, &used)) {
            Some(t) => {
                times.push(t);
                used[t].push(g.clone());
                from = t;
            }
            None => break,
        }
    }
    let mut rewards = vec![0.0; log.len()];
    for &t in &times {
        rewards[t] += 1.0;
    }
    let end = if !goals.is_empty() && times.len() == goals.len() {
        *times.last().unwrap()
    } else {
        log.len() - 1
    };
    (rewards, end, times)
}

/// Every (instruction, rewards) that relabeling may legally produce.
pub fn enumerate_relabelings(traj: &Trajectory) -> Vec<(Vec<Goal>, Vec<f32>)> {
    let log = traj.achieved_log();
    let goals = traj.instruction.goals();
    let (_, _, times) = oracle_rewards(&log, goals);
    let n = times.len();
    let k = goals.len();
    // achievements not consumed by the completed original steps
    let mut free = log.clone();
    for (&t, g) in times.iter().zip(goals) {
        let i = free[t].iter().position(|x| x == g).unwrap();
        free[t].remove(i);
    }
    let rows: Vec<usize> = (1..log.len()).filter(|&t| !free[t].is_empty()).collect();
    let mut out = Vec::new();
    let mut picks: Vec<(usize, Goal)> = Vec::new();
    fn rec(
        rows: &[usize],
        start: usize,
        left: usize,
        free: &[Vec<Goal>],
        picks: &mut Vec<(usize, Goal)>,
        emit: &mut dyn FnMut(&[(usize, Goal)]),
    ) {
        emit(picks);
        if left == 0 {
            return;
        }
        for i in start..rows.len() {
            let t = rows[i];
            let mut distinct = free[t].clone();
            distinct.sort();
            distinct.dedup();
            for g in distinct {
                picks.push((t, g));
                rec(rows, i + 1, left - 1, free, picks, emit);
                picks.pop();
            }
        }
    }
    let originals: Vec<(usize, Goal)> = times.iter().copied().zip(goals.iter().cloned()).collect();
    let mut emit = |alts: &[(usize, Goal)]| {
        if n + alts.len() == 0 {
            let rewards = traj.steps.iter().map(|s| s.prev_reward).collect();
            out.push((goals.to_vec(), rewards));
            return;
        }
        let mut merged: Vec<(usize, Goal)> = alts.to_vec();
        merged.extend(originals.iter().cloned());
        merged.sort_by_key(|p| p.0);
        let instr: Vec<Goal> = merged.into_iter().map(|p| p.1).collect();
        let (rewards, end, _) = oracle_rewards(&log, &instr);
        out.push((instr, rewards[..=end].to_vec()));
    };
    rec(&rows, 0, k - n, &free, &mut picks, &mut emit);
    out
}
