use std::fs;
use std::path::Path;

use icrl_core::envs::EnvSpec;
use icrl_core::learner::Agent;
use icrl_core::orchestrator::{
    evaluate, parse_config_str, Checkpoint, ConfigError, MetricRecord, RecordKind, RunConfig,
    Trainer, CHECKPOINT_FILE, METRICS_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = "
# small T-Maze run
env = tmaze
env.horizon = 8
seed = 5
model.dim = 8
model.ff_dim = 16
model.heads = 2
model.layers = 1
model.timestep_mlp = [8]
model.token_dim = 2
learner.actor_dims = [8]
learner.critic_dims = [8]
learner.gamma_set = [0.9, 0.99]
train.actors = 2
train.batch_size = 4
train.updates_per_epoch = 2
train.epochs = 4
train.eval_episodes = 4
";

fn tiny(extra: &str) -> RunConfig {
    parse_config_str(&format!("{TINY}\n{extra}")).unwrap()
}

fn params<S: icrl_core::Real>(agent: &Agent<S>) -> Vec<Vec<S>> {
    agent
        .store
        .iter()
        .map(|(_, p)| p.value.data().to_vec())
        .collect()
}

fn run(config: &RunConfig, dir: &Path, epochs: usize) -> Trainer<f32> {
    let mut t = Trainer::new(config.clone(), dir).unwrap();
    for _ in 0..epochs {
        t.run_epoch().unwrap();
    }
    t
}

#[test]
fn preset_defaults_survive_parsing() {
    let c = parse_config_str("env = mazerunner15").unwrap();
    assert_eq!(c.learner.optimizer.lr, 3e-4);
    assert_eq!(c.learner.optimizer.weight_decay, 1e-4);
    assert_eq!(c.batch_size, 24);
    assert_eq!(c.learner.critics, 4);
    assert_eq!(c.learner.clipped_critics, 2);
    assert_eq!(c.learner.tau, 0.003);
    assert_eq!(c.actors, 24);
    assert_eq!(c.buffer_capacity, 20_000);
    assert_eq!(c.learner.gammas.len(), 6);
    assert_eq!(
        c.learner.gammas.gammas()[c.learner.gammas.selected()],
        0.999
    );
    let p = parse_config_str("env = package").unwrap();
    assert_eq!(p.buffer_capacity, 15_000);
    assert_eq!(p.updates_per_epoch, 1500);
}

#[test]
fn gamma_set_override_selects_last() {
    let c = tiny("");
    assert_eq!(c.learner.gammas.gammas(), &[0.9, 0.99]);
    assert_eq!(c.learner.gammas.selected(), 1);
    let c = tiny("learner.gamma_index = 0");
    assert_eq!(c.learner.gammas.selected(), 0);
}

#[test]
fn bad_configs_are_rejected() {
    assert!(matches!(
        parse_config_str(&format!("{TINY}\nlearner.critics = 1")),
        Err(ConfigError::Value { .. } | ConfigError::Invalid(_))
    ));
    assert!(matches!(
        parse_config_str(&format!("{TINY}\ntrain.bogus = 3")),
        Err(ConfigError::UnknownKey { .. })
    ));
    assert!(parse_config_str(&format!("{TINY}\nseed = 6")).is_err());
    assert!(parse_config_str("seed = 1").is_err());
    assert!(parse_config_str("env = nowhere").is_err());
    assert!(parse_config_str(&format!("{TINY}\ntrain.batch_size = -1")).is_err());
    assert!(matches!(
        parse_config_str(&format!("{TINY}\nno equals sign")),
        Err(ConfigError::Syntax { .. })
    ));
}

#[test]
fn hash_ignores_epoch_budget_only() {
    let a = tiny("");
    let mut b = a.clone();
    b.epochs = 99;
    b.record_wallclock = true;
    assert_eq!(a.hash(), b.hash());
    b.learner.optimizer.lr *= 2.0;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn zero_updates_leave_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny("");
    config.updates_per_epoch = 0;
    let mut t: Trainer<f32> = Trainer::new(config, dir.path()).unwrap();
    let before = params(&t.agent);
    for _ in 0..3 {
        t.run_epoch().unwrap();
    }
    assert!(!t.buffer.is_empty());
    assert_eq!(params(&t.agent), before);
    assert_eq!(t.agent.updates, 0);
}

#[test]
fn metrics_stream_has_update_and_epoch_records() {
    let dir = tempfile::tempdir().unwrap();
    let t = run(&tiny(""), dir.path(), 3);
    drop(t);
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let recs: Vec<MetricRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let epochs = recs.iter().filter(|r| r.kind == RecordKind::Epoch).count();
    assert_eq!(epochs, 3);
    for r in recs.iter().filter(|r| r.kind == RecordKind::Update) {
        assert!(r.loss_td.unwrap().is_finite());
        assert!(r.grad_norm.unwrap() >= 0.0);
        assert_eq!(r.wallclock_s, 0.0);
    }
    assert!(recs.iter().any(|r| r.kind == RecordKind::Update));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let config = tiny("");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run(&config, a.path(), 3);
    let tb = run(&config, b.path(), 3);
    assert_eq!(
        ta.checkpoint().to_bytes().unwrap(),
        tb.checkpoint().to_bytes().unwrap()
    );
    drop((ta, tb));
    assert_eq!(
        fs::read(a.path().join(METRICS_FILE)).unwrap(),
        fs::read(b.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn different_seeds_diverge() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut other = tiny("");
    other.seed = 6;
    let ta = run(&tiny(""), a.path(), 1);
    let tb = run(&other, b.path(), 1);
    assert_ne!(params(&ta.agent), params(&tb.agent));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = run(&tiny(""), dir.path(), 2);
    let path = dir.path().join(CHECKPOINT_FILE);
    t.save_checkpoint(&path).unwrap();
    let first = fs::read(&path).unwrap();
    let loaded = Checkpoint::<f32>::read(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), first);
    assert_eq!(loaded.epoch, 2);
    let mut corrupt = first.clone();
    corrupt[0] ^= 0xff;
    assert!(Checkpoint::<f32>::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&first[..first.len() / 2]).is_err());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let config = tiny("");
    let straight = tempfile::tempdir().unwrap();
    let full = run(&config, straight.path(), 4);

    let split = tempfile::tempdir().unwrap();
    let half = run(&config, split.path(), 2);
    let ck = split.path().join(CHECKPOINT_FILE);
    half.save_checkpoint(&ck).unwrap();
    drop(half);
    let mut resumed: Trainer<f32> = Trainer::resume(config, split.path(), &ck).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.run_epoch().unwrap();
    resumed.run_epoch().unwrap();
    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        full.checkpoint().to_bytes().unwrap()
    );
    drop((full, resumed));
    assert_eq!(
        fs::read(split.path().join(METRICS_FILE)).unwrap(),
        fs::read(straight.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let t = run(&tiny(""), dir.path(), 1);
    let ck = dir.path().join(CHECKPOINT_FILE);
    t.save_checkpoint(&ck).unwrap();
    drop(t);
    let other = tiny("learner.lr = 0.01");
    assert!(Trainer::<f32>::resume(other, dir.path(), &ck).is_err());
    let mut longer = tiny("");
    longer.epochs = 40;
    assert!(Trainer::<f32>::resume(longer, dir.path(), &ck).is_ok());
}

#[test]
fn buffer_never_exceeds_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let mut t: Trainer<f32> = Trainer::new(tiny("buffer.capacity = 3"), dir.path()).unwrap();
    for _ in 0..4 {
        let s = t.run_epoch().unwrap();
        assert!(s.buffer_size <= 3);
        assert!(t.buffer.len() <= 3);
    }
    assert_eq!(t.buffer.len(), 3);
}

#[test]
fn untrained_tmaze_policy_scores_near_zero() {
    let config = tiny("");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let agent: Agent<f32> =
        Agent::new(config.encoder_config(), config.learner.clone(), &mut rng).unwrap();
    let n = 200;
    let spec = EnvSpec::TMaze { horizon: 8 };
    let report = evaluate(&agent, &spec, n, 1, 3).unwrap();
    assert_eq!(report.returns.len(), n);
    // Returns are ±1, so the standard error of the mean is at most 1/√n.
    assert!(report.mean_return.abs() <= 3.0 / (n as f64).sqrt());
    assert!((0.0..=1.0).contains(&report.success_rate));
    let again = evaluate(&agent, &spec, n, 1, 3).unwrap();
    assert_eq!(report, again);
}
