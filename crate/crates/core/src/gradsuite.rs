//! Finite-difference checks over every tape primitive and the trajectory encoder, runnable
//! outside the test harness.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{grad_check, DiffError, Tape, Tensor, Var};
use crate::nn::{Graph, ParamStore};
use crate::trajencoder::{
    EncoderConfig, EncoderError, GoalEmbedKind, TimestepBatch, TimestepRecord, TrajEncoder,
};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Coordinates sampled per parameter tensor in the encoder checks.
const COORDS_PER_PARAM: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_relative_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .expect("shape matches data")
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=5)).collect()
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

struct Cases(Vec<GradCase>);

impl Cases {
    fn check(
        &mut self,
        name: &str,
        point: &Tensor<f64>,
        f: impl Fn(&mut Tape<f64>, Var) -> Result<Var, DiffError>,
    ) -> Result<(), DiffError> {
        let r = grad_check(f, point, STEP)?;
        self.record(name, r.max_relative_error);
        Ok(())
    }

    fn record(&mut self, name: &str, err: f64) {
        match self.0.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_relative_error = c.max_relative_error.max(err),
            None => self.0.push(GradCase {
                name: name.to_string(),
                max_relative_error: err,
            }),
        }
    }
}

fn primitive_cases(cases: &mut Cases, trial: u64) -> Result<(), DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial);
    let shape = random_shape(&mut rng, 3);
    let x = random_tensor(&mut rng, &shape);
    let s = trial;

    cases.check("scale", &x, |t, v| {
        let y = t.scale(v, -1.7);
        weighted_sum(t, y, s)
    })?;
    cases.check("square", &x, |t, v| {
        let y = t.square(v);
        weighted_sum(t, y, s)
    })?;
    cases.check("exp", &x, |t, v| {
        let y = t.exp(v);
        weighted_sum(t, y, s)
    })?;
    let away = x.map(|v| if v.abs() < 1e-3 { 0.1 } else { v });
    cases.check("leaky-relu", &away, |t, v| {
        let y = t.leaky_relu(v, 0.01);
        weighted_sum(t, y, s)
    })?;
    let positive = x.map(|v| v.abs() + 0.2);
    cases.check("log", &positive, |t, v| {
        let y = t.log(v, 0.0);
        weighted_sum(t, y, s)
    })?;

    let other = random_tensor(&mut rng, &shape[1..]);
    let denom = other.map(|v| v.abs() + 0.5);
    type Bin = fn(&mut Tape<f64>, Var, Var) -> Result<Var, DiffError>;
    let bins: [(&str, Bin, &Tensor<f64>); 4] = [
        ("add", |t, a, b| t.add(a, b), &other),
        ("sub", |t, a, b| t.sub(a, b), &other),
        ("mul", |t, a, b| t.mul(a, b), &other),
        ("div", |t, a, b| t.div(a, b), &denom),
    ];
    for (name, op, rhs) in bins {
        cases.check(name, &x, |t, v| {
            let c = t.constant(rhs.clone());
            let y = op(t, v, c)?;
            weighted_sum(t, y, s)
        })?;
        cases.check(name, rhs, |t, v| {
            let c = t.constant(x.clone());
            let y = op(t, c, v)?;
            weighted_sum(t, y, s)
        })?;
    }

    let (b, m, k, n) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=5),
        rng.gen_range(1..=5),
        rng.gen_range(1..=5),
    );
    let a = random_tensor(&mut rng, &[b, m, k]);
    let w = random_tensor(&mut rng, &[k, n]);
    let wb = random_tensor(&mut rng, &[b, k, n]);
    cases.check("matmul", &a, |t, v| {
        let c = t.constant(w.clone());
        let y = t.matmul(v, c)?;
        weighted_sum(t, y, s)
    })?;
    cases.check("matmul", &w, |t, v| {
        let c = t.constant(a.clone());
        let y = t.matmul(c, v)?;
        weighted_sum(t, y, s)
    })?;
    cases.check("matmul", &wb, |t, v| {
        let c = t.constant(a.clone());
        let y = t.matmul(c, v)?;
        weighted_sum(t, y, s)
    })?;

    let axis = rng.gen_range(0..3);
    cases.check("reshape", &x, |t, v| {
        let n = t.value(v).numel();
        let y = t.reshape(v, &[n])?;
        weighted_sum(t, y, s)
    })?;
    cases.check("transpose", &x, |t, v| {
        let y = t.transpose(v, axis, 2)?;
        weighted_sum(t, y, s)
    })?;
    let start = rng.gen_range(0..shape[axis]);
    cases.check("slice", &x, |t, v| {
        let y = t.slice(v, axis, start, shape[axis])?;
        weighted_sum(t, y, s)
    })?;
    let mut cat_shape = shape.clone();
    cat_shape[axis] = rng.gen_range(1..=5);
    let cat = random_tensor(&mut rng, &cat_shape);
    cases.check("concat", &x, |t, v| {
        let c = t.constant(cat.clone());
        let y = t.concat(&[c, v, v], axis)?;
        weighted_sum(t, y, s)
    })?;

    cases.check("sum", &x, |t, v| {
        let y = t.sum(v, Some(axis))?;
        weighted_sum(t, y, s)
    })?;
    cases.check("sum", &x, |t, v| t.sum(v, None))?;
    cases.check("mean", &x, |t, v| {
        let y = t.mean(v, Some(axis))?;
        weighted_sum(t, y, s)
    })?;
    cases.check("mean", &x, |t, v| t.mean(v, None))?;
    cases.check("softmax", &x, |t, v| {
        let y = t.softmax(v, axis)?;
        weighted_sum(t, y, s)
    })?;
    let mut ln_shape = shape.clone();
    ln_shape[2] = ln_shape[2].max(2);
    let xl = random_tensor(&mut rng, &ln_shape);
    cases.check("layer-norm", &xl, |t, v| {
        let y = t.layer_norm(v, 1e-5)?;
        weighted_sum(t, y, s)
    })?;

    let (vocab, dim) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
    let table = random_tensor(&mut rng, &[vocab, dim]);
    let ids: Vec<usize> = (0..rng.gen_range(1..=5))
        .map(|_| rng.gen_range(0..vocab))
        .collect();
    cases.check("embedding-lookup", &table, |t, v| {
        let y = t.embedding(v, &ids)?;
        weighted_sum(t, y, s)
    })?;
    let idx: Vec<usize> = (0..shape[0] * shape[1])
        .map(|_| rng.gen_range(0..shape[2]))
        .collect();
    cases.check("gather", &x, |t, v| {
        let y = t.gather(v, &idx)?;
        weighted_sum(t, y, s)
    })?;
    let mask: Rc<[bool]> = (0..shape[2]).map(|_| rng.gen_bool(0.4)).collect();
    cases.check("masked-fill", &x, |t, v| {
        let y = t.masked_fill(v, mask.clone(), -3.0)?;
        weighted_sum(t, y, s)
    })?;
    let others = [
        random_tensor(&mut rng, &shape),
        random_tensor(&mut rng, &shape),
    ];
    cases.check("min-over-set", &x, |t, v| {
        let a = t.constant(others[0].clone());
        let b = t.constant(others[1].clone());
        let y = t.min_over_set(&[a, v, b])?;
        weighted_sum(t, y, s)
    })?;
    // central differences see through stop-gradient, so only the zero analytic side is checked
    let r = grad_check(
        |t, v| {
            let y = t.stop_gradient(v);
            weighted_sum(t, y, s)
        },
        &x,
        STEP,
    )?;
    let leak = r.analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    cases.record("stop-gradient", leak);
    Ok(())
}

fn encoder_config(goal_embed: GoalEmbedKind) -> EncoderConfig {
    EncoderConfig {
        obs_dim: 3,
        action_count: 3,
        vocab_size: 6,
        max_goals: 2,
        goal_len: 2,
        token_dim: 4,
        goal_embed,
        timestep_mlp_dims: vec![10, 6],
        model_dim: 8,
        ff_dim: 12,
        heads: 2,
        layers: 2,
        max_context: 6,
    }
}

fn random_batch(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<TimestepBatch, EncoderError> {
    let seqs: Vec<Vec<TimestepRecord>> = [5usize, 3]
        .iter()
        .map(|&len| {
            (0..len)
                .map(|t| TimestepRecord {
                    observation: (0..cfg.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    prev_action: (t > 0).then(|| rng.gen_range(0..cfg.action_count)),
                    prev_reward: rng.gen_range(-1.0..1.0),
                    reset_flag: t == 0,
                    time_feature: t as f64 / 6.0,
                    instruction_tokens: vec![1, 4, 2, 0],
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[TimestepRecord]> = seqs.iter().map(|s| s.as_slice()).collect();
    TimestepBatch::from_sequences(cfg, &refs)
}

/// Every trainable encoder parameter against central differences of `Σ w ⊙ latents`.
fn encoder_param_case(
    cases: &mut Cases,
    name: &str,
    cfg: EncoderConfig,
    seed: u64,
) -> Result<(), EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut enc = TrajEncoder::new(&mut store, cfg.clone(), &mut rng)?;
    for id in store.ids() {
        for d in store.get_mut(id).data_mut() {
            *d += rng.gen_range(-0.5..0.5);
        }
    }
    enc.refresh_spectral(&store);
    let batch = random_batch(&cfg, &mut rng)?;
    let shape = [batch.batch, batch.len, cfg.model_dim];
    let w = random_tensor(&mut rng, &shape);
    let eval = |s: &ParamStore<f64>| -> Result<f64, EncoderError> {
        let mut g = Graph::new(s, false);
        let out = enc.forward(&mut g, &batch)?;
        Ok(g.value(out.latents)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut g = Graph::new(&store, true);
    let out = enc.forward(&mut g, &batch)?;
    let wv = g.constant(w.clone());
    let prod = g.tape.mul(out.latents, wv)?;
    let root = g.tape.sum(prod, None)?;
    let mut grads = g.tape.backward(root)?;
    let per_param = g.param_grads(&mut grads);
    let mut worst = 0.0f64;
    for id in enc.params() {
        let n = store.get(id).numel();
        let analytic = per_param[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for _ in 0..COORDS_PER_PARAM.min(n) {
            let i = rng.gen_range(0..n);
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    cases.record(name, worst);
    Ok(())
}

/// Input Jacobian of the Transformer stack, which must also be exactly zero for future inputs.
fn transformer_jacobian_case(cases: &mut Cases, seed: u64) -> Result<(), EncoderError> {
    let cfg = encoder_config(GoalEmbedKind::FeedForward(vec![6]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let enc = TrajEncoder::new(&mut store, cfg.clone(), &mut rng)?;
    let (t, d) = (5, cfg.model_dim);
    let x = random_tensor(&mut rng, &[1, t, d]);
    let mut worst = 0.0f64;
    let mut leak = 0.0f64;
    for out in 0..t * d {
        let f = |tape: &mut Tape<f64>, v: Var| -> Result<Var, DiffError> {
            let mut g = Graph::from_tape(&store, std::mem::take(tape));
            let y = enc.transformer.forward(&mut g, v).map_err(|e| match e {
                EncoderError::Diff(d) => d,
                other => DiffError::InvalidArgument {
                    op: "transformer",
                    msg: other.to_string(),
                },
            });
            *tape = g.tape;
            let y = tape.reshape(y?.latents, &[t * d])?;
            let y = tape.slice(y, 0, out, out + 1)?;
            tape.sum(y, None)
        };
        let r = grad_check(f, &x, STEP)?;
        worst = worst.max(r.max_relative_error);
        for (i, g) in r.analytic.iter().enumerate() {
            if i / d > out / d {
                leak = leak.max(g.abs());
            }
        }
    }
    cases.record("transformer input jacobian", worst);
    cases.record("transformer causality", leak);
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Runs `trials` randomized rounds of the primitive checks plus the encoder checks.
pub fn run(seed: u64, trials: u64) -> Result<Vec<GradCase>, SuiteError> {
    let mut cases = Cases(Vec::new());
    for trial in 0..trials {
        primitive_cases(&mut cases, seed.wrapping_add(trial))?;
    }
    encoder_param_case(
        &mut cases,
        "encoder params (feed-forward goals)",
        encoder_config(GoalEmbedKind::FeedForward(vec![6, 5])),
        seed,
    )?;
    encoder_param_case(
        &mut cases,
        "encoder params (recurrent goals)",
        encoder_config(GoalEmbedKind::Recurrent { hidden: 5, out: 4 }),
        seed.wrapping_add(1),
    )?;
    transformer_jacobian_case(&mut cases, seed)?;
    Ok(cases.0)
}
