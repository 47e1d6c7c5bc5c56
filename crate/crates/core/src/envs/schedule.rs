use rand::Rng;
use serde::{Deserialize, Serialize};

/// ε annealed across the timesteps of a trial, with both endpoints annealed over training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start_max: f64,
    pub start_min: f64,
    pub end_max: f64,
    pub end_min: f64,
    /// Actor timesteps over which the endpoints move from max to min.
    pub anneal_steps: u64,
    pub jitter_low: f64,
    pub jitter_high: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start_max: 1.0,
            start_min: 0.05,
            end_max: 0.8,
            end_min: 0.01,
            anneal_steps: 1_000_000,
            jitter_low: 0.5,
            jitter_high: 1.5,
        }
    }
}

fn lerp(a: f64, b: f64, p: f64) -> f64 {
    a * (1.0 - p) + b * p
}

impl EpsilonSchedule {
    pub fn draw_jitter(&self, rng: &mut impl Rng) -> f64 {
        if self.jitter_high > self.jitter_low {
            rng.gen_range(self.jitter_low..self.jitter_high)
        } else {
            self.jitter_low
        }
    }
}

pub fn epsilon_at(
    schedule: &EpsilonSchedule,
    t: usize,
    horizon: usize,
    actor_steps: u64,
    jitter: f64,
) -> f64 {
    let p = if schedule.anneal_steps == 0 {
        1.0
    } else {
        (actor_steps as f64 / schedule.anneal_steps as f64).min(1.0)
    };
    let start = lerp(schedule.start_max, schedule.start_min, p);
    let end = lerp(schedule.end_max, schedule.end_min, p);
    let frac = if horizon == 0 {
        1.0
    } else {
        (t as f64 / horizon as f64).min(1.0)
    };
    (jitter * lerp(start, end, frac)).clamp(0.0, 1.0)
}
