use std::collections::VecDeque;

use icrl_core::envs::keydoor::MOVES;
use icrl_core::envs::mazerunner::cell_goal;
use icrl_core::envs::package::{DELIVER_BASE, FORWARD, LEFT, NOOP, RIGHT};
use icrl_core::envs::tmaze::{DOWN, UP};
use icrl_core::envs::{
    epsilon_at, DarkKeyDoor, EnvSpec, Environment, EpsilonSchedule, Maze, MazeRunner,
    PackageDelivery, Rollout, TMaze,
};
use icrl_core::replay::{replay_rewards, Trajectory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn specs() -> Vec<EnvSpec> {
    vec![
        EnvSpec::TMaze { horizon: 12 },
        EnvSpec::DarkKeyDoor {
            grid: 5,
            episode_len: 10,
            horizon: 60,
        },
        EnvSpec::PackageDelivery {
            length: 30,
            horizon: 180,
        },
        EnvSpec::MazeRunner {
            size: 15,
            horizon: 400,
            min_goals: 1,
            max_goals: 3,
            permute_actions: true,
            include_xy: true,
        },
    ]
}

fn random_rollout(spec: &EnvSpec, seed: u64, action_seed: u64) -> Rollout {
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut r = Rollout::new(spec, seed);
    while !r.finished() {
        r.step(rng.gen_range(0..spec.action_count()));
    }
    r
}

#[test]
fn tmaze_cue_only_at_start_and_reward_at_junction() {
    let h = 10;
    for seed in 0..6 {
        let env = TMaze::new(seed, h);
        assert_eq!(env.corridor_len(), h - 2);
        let correct = if env.cue > 0.0 { UP } else { DOWN };
        for (choice, expected) in [(correct, 1.0), (1 - correct, -1.0)] {
            let mut r = Rollout::new(&EnvSpec::TMaze { horizon: h }, seed);
            let mut steps = 0;
            while !r.step(if steps == h - 1 { choice } else { 1 - choice }) {
                steps += 1;
            }
            let rec = r.records();
            assert_eq!(rec.len(), h + 1);
            assert_eq!(rec[0].observation[2], env.cue);
            assert!(rec[1..].iter().all(|x| x.observation[2] == 0.0));
            assert_eq!(rec[h - 1].observation[1], 1.0);
            assert!(rec[..h - 1].iter().all(|x| x.observation[1] == 0.0));
            assert!(rec[1..h].iter().all(|x| x.prev_reward == 0.0));
            assert_eq!(rec[h].prev_reward, expected);
            assert_eq!(rec[h].time_feature, 1.0);
            assert_eq!(r.success(), expected > 0.0);
        }
    }
}

#[test]
fn tmaze_cues_cover_both_sides() {
    let ups = (0..200).filter(|&s| TMaze::new(s, 8).cue > 0.0).count();
    assert!((60..140).contains(&ups), "{ups}");
}

#[test]
fn rollout_row_zero_and_time_feature() {
    for spec in specs() {
        let r = random_rollout(&spec, 3, 4);
        let rec = r.records();
        assert!(rec[0].reset_flag);
        assert_eq!(rec[0].prev_action, None);
        assert_eq!(rec[0].prev_reward, 0.0);
        assert_eq!(rec[0].time_feature, 0.0);
        assert_eq!(rec[0].observation.len(), spec.obs_dim());
        for (t, x) in rec.iter().enumerate() {
            assert!((x.time_feature - t as f64 / spec.horizon() as f64).abs() < 1e-6);
            assert_eq!(
                x.instruction_tokens.len(),
                spec.max_goals() * spec.goal_len()
            );
            assert!(x
                .instruction_tokens
                .iter()
                .all(|&k| (k as usize) < spec.vocab_size()));
        }
        assert!(rec.len() <= spec.horizon() + 1);
        if !spec.has_instructions() {
            assert!(rec[0].instruction_tokens.iter().all(|&k| k == 0));
        }
    }
}

#[test]
fn truncation_puts_time_one_on_final_row() {
    let spec = EnvSpec::DarkKeyDoor {
        grid: 5,
        episode_len: 10,
        horizon: 37,
    };
    let r = random_rollout(&spec, 1, 1);
    assert_eq!(r.records().len(), 38);
    assert_eq!(r.records().last().unwrap().time_feature, 1.0);
}

#[test]
fn always_failing_agent_sees_every_episode() {
    let spec = EnvSpec::DarkKeyDoor {
        grid: 9,
        episode_len: 50,
        horizon: 500,
    };
    let mut r = Rollout::new(&spec, 0);
    while !r.step(0) {}
    let rec = r.records();
    assert_eq!(rec.len(), 501);
    let resets = rec[..500].iter().filter(|x| x.reset_flag).count();
    assert_eq!(resets, 10);
    assert_eq!(r.episode_returns(), vec![0.0; 10]);
}

fn bfs_path(grid: usize, from: (usize, usize), to: (usize, usize)) -> Vec<usize> {
    let mut prev = vec![None; grid * grid];
    let mut queue = VecDeque::from([from]);
    let idx = |p: (usize, usize)| p.1 * grid + p.0;
    prev[idx(from)] = Some((from, usize::MAX));
    while let Some(p) = queue.pop_front() {
        for (a, (dx, dy)) in MOVES.iter().enumerate() {
            let (x, y) = (p.0 as i64 + dx, p.1 as i64 + dy);
            if x < 0 || y < 0 || x >= grid as i64 || y >= grid as i64 {
                continue;
            }
            let q = (x as usize, y as usize);
            if prev[idx(q)].is_none() {
                prev[idx(q)] = Some((p, a));
                queue.push_back(q);
            }
        }
    }
    let mut path = Vec::new();
    let mut cur = to;
    while cur != from {
        let (p, a) = prev[idx(cur)].unwrap();
        path.push(a);
        cur = p;
    }
    path.reverse();
    path
}

#[test]
fn key_door_oracle_return_bound() {
    let (grid, h) = (9, 500);
    for seed in 0..20 {
        let env = DarkKeyDoor::new(seed, grid, 50, h);
        let to_key = bfs_path(grid, DarkKeyDoor::START, env.key);
        let to_door = bfs_path(grid, env.key, env.door);
        let plan: Vec<usize> = to_key.iter().chain(&to_door).copied().collect();
        let spec = EnvSpec::DarkKeyDoor {
            grid,
            episode_len: 50,
            horizon: h,
        };
        let mut r = Rollout::new(&spec, seed);
        let mut i = 0;
        while !r.step(plan[i % plan.len()]) {
            i += 1;
        }
        let bound = 2.0 * (h / plan.len()) as f64;
        assert!(
            r.total_return() >= bound,
            "seed {seed}: {} < {bound}",
            r.total_return()
        );
        let eps = r.episode_returns();
        assert!(eps[..eps.len() - 1].iter().all(|&x| x == 2.0));
    }
}

#[test]
fn key_door_layout_is_fixed_per_seed() {
    let a = DarkKeyDoor::new(5, 5, 50, 250);
    let b = DarkKeyDoor::new(5, 5, 50, 250);
    assert_eq!((a.key, a.door), (b.key, b.door));
    assert_ne!(a.key, a.door);
    assert_ne!(a.key, DarkKeyDoor::START);
}

fn package_oracle(seed: u64) -> (Rollout, usize) {
    let env = PackageDelivery::new(seed, 30, 180);
    let spec = EnvSpec::PackageDelivery {
        length: 30,
        horizon: 180,
    };
    let mut r = Rollout::new(&spec, seed);
    let mut sim = env.clone();
    let mut next = 0;
    while !r.finished() {
        let a = if sim.pos == sim.targets()[next] {
            next += 1;
            sim.deliver_action
        } else {
            sim.fork_at(sim.pos).unwrap_or(FORWARD)
        };
        sim.step(a);
        r.step(a);
    }
    (r, env.targets().len())
}

#[test]
fn package_delivery_shape() {
    let spec = EnvSpec::PackageDelivery {
        length: 30,
        horizon: 180,
    };
    assert_eq!(spec.action_count(), 8);
    assert_eq!(spec.horizon(), 180);
    for seed in 0..50 {
        let env = PackageDelivery::new(seed, 30, 180);
        assert!((2..=6).contains(&env.forks.len()));
        assert!((2..=4).contains(&env.targets().len()));
        assert_eq!(env.budget, 2 * env.targets().len());
        assert!((DELIVER_BASE..8).contains(&env.deliver_action));
        assert!(env.targets().iter().all(|&p| env.fork_at(p).is_none()));
    }
}

#[test]
fn package_oracle_earns_k() {
    for seed in 0..50 {
        let (r, k) = package_oracle(seed);
        assert_eq!(r.total_return(), k as f64, "seed {seed}");
        assert!(r.success());
    }
}

#[test]
fn package_wrong_turn_and_road_end_teleport() {
    let mut env = PackageDelivery::new(7, 30, 180);
    let (fork, turn) = env.forks[0];
    while env.pos < fork {
        let a = env.fork_at(env.pos).unwrap_or(FORWARD);
        env.step(a);
    }
    let wrong = if turn == LEFT { RIGHT } else { LEFT };
    let out = env.step(wrong);
    assert_eq!(env.pos, 0);
    assert_eq!(out.observation[0], 0.0);
    env.step(NOOP);
    assert_eq!(env.pos, 0);
    while env.pos < 29 {
        let a = env.fork_at(env.pos).unwrap_or(FORWARD);
        env.step(a);
    }
    let a = env.fork_at(29).unwrap_or(FORWARD);
    env.step(a);
    assert_eq!(env.pos, 0);
}

#[test]
fn package_budget_ends_trial() {
    let mut env = PackageDelivery::new(2, 30, 180);
    let wrong = if env.deliver_action == DELIVER_BASE {
        DELIVER_BASE + 1
    } else {
        DELIVER_BASE
    };
    for i in 0..env.budget {
        let out = env.step(wrong);
        assert!(out.achieved.is_empty());
        assert_eq!(out.terminal, i + 1 == env.budget);
    }
    assert_eq!(env.remaining, 0);
}

/// Ray march written independently of the environment: walk cell by cell over the string grid.
fn ray(rows: &[&str], r: usize, c: usize, dr: i64, dc: i64) -> f64 {
    let n = rows.len() as i64;
    let (mut rr, mut cc, mut k) = (r as i64, c as i64, 0);
    loop {
        rr += dr;
        cc += dc;
        if rr < 0
            || cc < 0
            || rr >= n
            || cc >= n
            || rows[rr as usize].as_bytes()[cc as usize] == b'#'
        {
            return k as f64 / n as f64;
        }
        k += 1;
    }
}

#[test]
fn depth_sensor_ray_march_oracle() {
    let rows = ["#####", "#...#", "#.#.#", ".....", "##.##"];
    let maze = Maze::from_rows(&rows);
    for r in 0..5 {
        for c in 0..5 {
            if rows[r].as_bytes()[c] == b'#' {
                continue;
            }
            let d = maze.depths((r, c));
            let want = [
                ray(&rows, r, c, -1, 0),
                ray(&rows, r, c, 0, 1),
                ray(&rows, r, c, 1, 0),
                ray(&rows, r, c, 0, -1),
            ];
            assert_eq!(d, want, "cell ({r},{c})");
        }
    }
    let w = 5;
    assert_eq!(maze.depths((3, 0))[1], (w - 1) as f64 / 5.0);
}

#[test]
fn maze_connectivity_over_100_seeds() {
    for seed in 0..100 {
        for size in [7, 15, 30] {
            let env = MazeRunner::new(seed, size, 400, 1, 3, false, false);
            let m = &env.maze;
            let reach = m.reachable(m.spawn());
            for (r, c) in m.free_cells() {
                assert!(
                    reach[r * size + c],
                    "seed {seed} size {size} cell ({r},{c})"
                );
            }
            assert!(env
                .targets
                .iter()
                .all(|&(r, c)| !m.is_wall(r as i64, c as i64)));
            assert!((1..=3).contains(&env.targets.len()));
            assert!(m.free_cells().len() > size);
        }
    }
}

#[test]
fn maze_spawn_tunnel_layout() {
    for seed in 0..20 {
        let n = 15;
        let m = MazeRunner::new(seed, n, 400, 1, 3, false, false).maze;
        let center = n / 2;
        assert_eq!(m.spawn(), (n - 1, center));
        for c in 0..n {
            assert!(!m.is_wall(n as i64 - 3, c as i64));
            for r in [n - 2, n - 1] {
                assert_eq!(m.is_wall(r as i64, c as i64), c != center);
            }
        }
    }
}

#[test]
fn maze_canonical_actions_without_permutation() {
    let rows = [".....", ".....", ".....", ".....", "....."];
    let mut env = MazeRunner::from_maze(Maze::from_rows(&rows), 50, vec![(0, 0)], false);
    assert_eq!(env.pos, (4, 2));
    let out = env.step(0);
    assert_eq!(env.pos, (3, 2));
    assert_eq!(out.achieved, vec![cell_goal(5, (3, 2))]);
    env.step(1);
    assert_eq!(env.pos, (3, 3));
    env.step(2);
    assert_eq!(env.pos, (4, 3));
    env.step(3);
    assert_eq!(env.pos, (4, 2));
    for seed in 0..10 {
        assert_eq!(
            MazeRunner::new(seed, 15, 400, 1, 3, false, true).permutation,
            [0, 1, 2, 3]
        );
    }
    assert!(
        (0..10).any(|s| MazeRunner::new(s, 15, 400, 1, 3, true, true).permutation != [0, 1, 2, 3])
    );
}

#[test]
fn maze_obs_dims() {
    let spec = |xy| EnvSpec::MazeRunner {
        size: 15,
        horizon: 400,
        min_goals: 1,
        max_goals: 3,
        permute_actions: false,
        include_xy: xy,
    };
    assert_eq!(spec(true).make(0).observe().len(), 6);
    assert_eq!(spec(false).make(0).observe().len(), 4);
    assert!(spec(true)
        .make(0)
        .observe()
        .iter()
        .all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn rollout_round_trips_through_trajectory_file() {
    for spec in specs() {
        let traj = random_rollout(&spec, 9, 2).into_trajectory();
        traj.validate().unwrap();
        let back = Trajectory::decode(&traj.encode().unwrap(), 0).unwrap();
        assert_eq!(back, traj);
    }
}

#[test]
fn epsilon_endpoints() {
    let s = EpsilonSchedule::default();
    let h = 100;
    assert_eq!(epsilon_at(&s, 0, h, 0, 1.0), 1.0);
    assert!((epsilon_at(&s, h, h, 0, 1.0) - 0.8).abs() < 1e-12);
    assert!((epsilon_at(&s, 0, h, s.anneal_steps, 1.0) - 0.05).abs() < 1e-12);
    assert!((epsilon_at(&s, h, h, 5 * s.anneal_steps, 1.0) - 0.01).abs() < 1e-12);
    assert_eq!(epsilon_at(&s, 0, h, 0, 1.5), 1.0);
    assert!((epsilon_at(&s, h, h, s.anneal_steps, 0.5) - 0.005).abs() < 1e-12);
}

#[test]
fn jitter_is_in_range() {
    let s = EpsilonSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<f64> = (0..1000).map(|_| s.draw_jitter(&mut rng)).collect();
    assert!(draws.iter().all(|j| (0.5..1.5).contains(j)));
    assert!(draws.iter().any(|&j| j < 0.7) && draws.iter().any(|&j| j > 1.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn epsilon_bounded_and_monotone(t in 0usize..200, steps in 0u64..2_000_000, jitter in 0.5f64..1.5) {
        let s = EpsilonSchedule::default();
        let h = 150;
        let e = epsilon_at(&s, t, h, steps, jitter);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(epsilon_at(&s, t + 1, h, steps, jitter) <= e + 1e-15);
        prop_assert!(epsilon_at(&s, t, h, steps + 1000, jitter) <= e + 1e-15);
        prop_assert!(epsilon_at(&s, 0, h, steps, 1.0) >= epsilon_at(&s, h, h, steps, 1.0));
    }

    #[test]
    fn env_rewards_match_replay(which in 0usize..4, seed in 0u64..1000, action_seed in 0u64..1000) {
        let spec = specs()[which].clone();
        let r = random_rollout(&spec, seed, action_seed);
        if spec.has_instructions() {
            let success = r.success();
            let traj = r.into_trajectory();
            let replay = replay_rewards(&traj.achieved_log(), &traj.instruction);
            let env_rewards: Vec<f32> = traj.steps.iter().map(|s| s.prev_reward).collect();
            prop_assert_eq!(replay.success, success);
            prop_assert_eq!(env_rewards, replay.rewards);
        } else {
            prop_assert!(r.steps().iter().all(|s| s.achieved.is_empty()));
        }
    }

    #[test]
    fn envs_are_deterministic(which in 0usize..4, seed in 0u64..1000, action_seed in 0u64..1000) {
        let spec = specs()[which].clone();
        let a = random_rollout(&spec, seed, action_seed);
        let b = Rollout::replay(&spec, seed, a.actions());
        prop_assert_eq!(a.steps(), b.steps());
        prop_assert_eq!(a.records(), b.records());
    }

    #[test]
    fn maze_achieved_log_is_current_cell(seed in 0u64..1000, action_seed in 0u64..1000) {
        let mut env = MazeRunner::new(seed, 15, 400, 1, 3, true, true);
        let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
        for _ in 0..200 {
            let out = env.step(rng.gen_range(0..4));
            prop_assert_eq!(out.achieved, vec![cell_goal(15, env.pos)]);
            prop_assert!(!env.maze.is_wall(env.pos.0 as i64, env.pos.1 as i64));
            let xy = &out.observation[4..];
            prop_assert_eq!(xy, &[env.pos.1 as f64 / 15.0, env.pos.0 as f64 / 15.0][..]);
            if out.terminal {
                break;
            }
        }
    }

    #[test]
    fn package_achievements_only_from_correct_delivery(seed in 0u64..1000, action_seed in 0u64..1000) {
        let mut env = PackageDelivery::new(seed, 30, 180);
        let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
        for _ in 0..180 {
            let a = rng.gen_range(0..8);
            let pos = env.pos;
            let out = env.step(a);
            if a == env.deliver_action {
                prop_assert_eq!(out.achieved, vec![icrl_core::envs::package::delivery_goal(pos)]);
            } else {
                prop_assert!(out.achieved.is_empty());
            }
            if out.terminal {
                break;
            }
        }
    }
}
