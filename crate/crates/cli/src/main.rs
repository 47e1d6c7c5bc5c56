use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use icrl_core::gradsuite;
use icrl_core::orchestrator::{
    evaluate, parse_config, Checkpoint, ConfigError, RunConfig, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
use icrl_core::replay::{
    sample_alternative_goals, Goal, GoalFrequencyStats, RarityStat, Sampling, SamplingMode,
    Trajectory,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "icrl",
    version,
    about = "In-context RL training and inspection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing metrics and checkpoints to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the stochastic policy and no exploration noise.
    Eval(EvalArgs),
    /// Show a stored trajectory's achievements and how often each would be picked for relabeling.
    InspectRelabel(InspectArgs),
    /// Finite-difference check of every primitive and the sequence model.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a run directory holding `checkpoint.bin`.
    checkpoint: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    /// Policy head to act with; defaults to the trained γ.
    #[arg(long)]
    gamma_index: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    trajectory: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Read goal frequency statistics from this checkpoint instead of the trajectory alone.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    trials: u64,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectRelabel(a) => inspect(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `icrl --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    parse_config(path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Usage(anyhow!(e)),
        _ => Failure::Usage(anyhow!("{}: {e}", path.display())),
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    let ck = a.out.join(CHECKPOINT_FILE);
    let mut trainer: Trainer<f32> = if a.resume {
        if !ck.exists() {
            return Err(Failure::Usage(anyhow!(
                "--resume given but {} does not exist",
                ck.display()
            )));
        }
        Trainer::resume(config, &a.out, &ck).context("resuming")?
    } else {
        Trainer::new(config, &a.out).context("starting run")?
    };
    trainer
        .train(|s| {
            eprintln!(
                "epoch {:>5} updates {:>7} return {} success {} td {} grad {} eps {:.3} buffer {}",
                s.epoch,
                s.updates,
                fmt_opt(s.mean_return),
                fmt_opt(s.success_rate),
                fmt_opt(s.loss_td),
                fmt_opt(s.grad_norm),
                s.epsilon,
                s.buffer_size
            )
        })
        .context("training")?;
    trainer.save_checkpoint(&ck).context("saving checkpoint")?;
    println!("metrics: {}", a.out.join(METRICS_FILE).display());
    println!("checkpoint: {}", ck.display());
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint<f32>, Failure> {
    let file = if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    if !file.exists() {
        return Err(Failure::Usage(anyhow!("{} does not exist", file.display())));
    }
    Ok(Checkpoint::read(&file).with_context(|| format!("reading {}", file.display()))?)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let gammas = &ck.agent.config.gammas;
    let gi = a.gamma_index.unwrap_or(gammas.selected());
    if gi >= gammas.len() {
        return Err(Failure::Usage(anyhow!(
            "--gamma-index {gi} out of range: the agent has {} heads",
            gammas.len()
        )));
    }
    let episodes = a.episodes.unwrap_or(ck.config.eval_episodes);
    let report = evaluate(&ck.agent, &ck.config.env, episodes, gi, a.seed).context("evaluating")?;
    println!(
        "{}",
        serde_json::json!({
            "epoch": ck.epoch,
            "episodes": episodes,
            "gamma": gammas.gammas()[gi],
            "mean_return": report.mean_return,
            "success_rate": report.success_rate,
        })
    );
    Ok(())
}

fn show_goal(g: &Goal) -> String {
    let t: Vec<String> = g.tokens().iter().map(|x| x.to_string()).collect();
    format!("({})", t.join(","))
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    if a.samples == 0 {
        return Err(Failure::Usage(anyhow!("--samples must be at least 1")));
    }
    let bytes = fs::read(&a.trajectory)
        .map_err(|e| Failure::Usage(anyhow!("cannot read {}: {e}", a.trajectory.display())))?;
    let traj = Trajectory::decode(&bytes, 0)
        .with_context(|| format!("decoding {}", a.trajectory.display()))?;
    let stats = match &a.checkpoint {
        Some(p) => read_checkpoint(p)?.buffer.stats,
        None => {
            let mut s = GoalFrequencyStats::new();
            s.update(&traj.achieved_log());
            s
        }
    };
    let replay = icrl_core::replay::replay_rewards(&traj.achieved_log(), &traj.instruction);
    let instruction: Vec<String> = traj.instruction.goals().iter().map(show_goal).collect();
    println!(
        "trajectory: {} rows, instruction [{}], completed {}/{}",
        traj.len(),
        instruction.join(" "),
        replay.completed(),
        traj.instruction.len()
    );
    println!("achieved goals:");
    for (t, s) in traj.steps.iter().enumerate() {
        if !s.achieved.is_empty() {
            let g: Vec<String> = s.achieved.iter().map(show_goal).collect();
            println!("  row {t:>5}: {}", g.join(" "));
        }
    }
    if traj.instruction.is_empty() || replay.completed() == traj.instruction.len() {
        println!("identity relabel only");
        return Ok(());
    }
    let modes = [
        ("uniform", SamplingMode::Uniform, RarityStat::Timestep),
        ("final", SamplingMode::Final, RarityStat::Timestep),
        (
            "rarity-top-k/timestep",
            SamplingMode::RarityTopK(a.top_k),
            RarityStat::Timestep,
        ),
        (
            "rarity-top-k/episode",
            SamplingMode::RarityTopK(a.top_k),
            RarityStat::Episode,
        ),
        (
            "rarity-above-median/timestep",
            SamplingMode::RarityAboveMedian,
            RarityStat::Timestep,
        ),
        (
            "rarity-above-median/episode",
            SamplingMode::RarityAboveMedian,
            RarityStat::Episode,
        ),
        (
            "rarity-above-min/timestep",
            SamplingMode::RarityAboveMin,
            RarityStat::Timestep,
        ),
        (
            "rarity-above-min/episode",
            SamplingMode::RarityAboveMin,
            RarityStat::Episode,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for (name, mode, stat) in modes {
        let sampling = Sampling { mode, stat };
        let mut hits: std::collections::BTreeMap<(usize, Goal), usize> = Default::default();
        for _ in 0..a.samples {
            for pick in sample_alternative_goals(&traj, 1, &stats, sampling, &mut rng) {
                *hits.entry(pick).or_default() += 1;
            }
        }
        println!("mode {name}:");
        if hits.is_empty() {
            println!("  no alternative goals achieved");
            continue;
        }
        for ((t, g), n) in &hits {
            println!(
                "  row {t:>5} goal {:<12} count {:>6} freq {:.4}",
                show_goal(g),
                stats.count(g, stat),
                *n as f64 / a.samples as f64
            );
        }
    }
    Ok(())
}

fn grad_check(a: GradArgs) -> Result<(), Failure> {
    let cases = gradsuite::run(a.seed, a.trials).context("running gradient suite")?;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "ok  " } else { "FAIL" };
        println!(
            "{status} {:<48} max rel err {:.3e}",
            c.name, c.max_relative_error
        );
        failed += !c.passed() as usize;
    }
    println!(
        "{} of {} checks passed (tolerance {:.0e})",
        cases.len() - failed,
        cases.len(),
        gradsuite::TOLERANCE
    );
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}
