use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, PAD_TOKEN};
use crate::diffcore::{Tensor, Var, LEAKY_SLOPE};
use crate::nn::{normal_tensor, Graph, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GoalEmbedKind {
    /// Concatenated token embeddings through an MLP with these layer widths.
    FeedForward(Vec<usize>),
    /// Single-layer recurrence over goals, then a linear map to `out`.
    Recurrent { hidden: usize, out: usize },
}

impl GoalEmbedKind {
    pub fn output_dim(&self) -> usize {
        match self {
            GoalEmbedKind::FeedForward(dims) => dims.last().copied().unwrap_or(0),
            GoalEmbedKind::Recurrent { out, .. } => *out,
        }
    }
}

/// Maps a padded instruction (goal tuples of token ids) to a fixed vector.
///
/// Padding ids read a constant zero row, so they contribute nothing; an all-padding
/// instruction yields the embedder's bias-only output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionEmbedder {
    /// Rows for token ids `1..vocab`; id 0 is padding.
    table: ParamId,
    vocab: usize,
    token_dim: usize,
    max_goals: usize,
    goal_len: usize,
    body: EmbedderBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum EmbedderBody {
    FeedForward(Mlp),
    Recurrent {
        input: Linear,
        recur: Linear,
        out: Linear,
        hidden: usize,
    },
}

impl InstructionEmbedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        vocab: usize,
        token_dim: usize,
        max_goals: usize,
        goal_len: usize,
        kind: &GoalEmbedKind,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = vocab.saturating_sub(1).max(1);
        let table = store.add(
            format!("{name}.tokens"),
            normal_tensor(rng, &[rows, token_dim], 1.0),
            true,
        );
        let body = match kind {
            GoalEmbedKind::FeedForward(dims) => EmbedderBody::FeedForward(Mlp::new(
                store,
                &format!("{name}.mlp"),
                max_goals * goal_len * token_dim,
                dims,
                rng,
            )),
            GoalEmbedKind::Recurrent { hidden, out } => EmbedderBody::Recurrent {
                input: Linear::new(
                    store,
                    &format!("{name}.rnn_in"),
                    goal_len * token_dim,
                    *hidden,
                    rng,
                ),
                recur: Linear::new(store, &format!("{name}.rnn_h"), *hidden, *hidden, rng),
                out: Linear::new(store, &format!("{name}.rnn_out"), *hidden, *out, rng),
                hidden: *hidden,
            },
        };
        Self {
            table,
            vocab,
            token_dim,
            max_goals,
            goal_len,
            body,
        }
    }

    pub fn tokens_per_instruction(&self) -> usize {
        self.max_goals * self.goal_len
    }

    pub fn output_dim(&self) -> usize {
        match &self.body {
            EmbedderBody::FeedForward(mlp) => mlp.output_dim(),
            EmbedderBody::Recurrent { out, .. } => out.fan_out,
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), EncoderError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab) {
            Some(&t) => Err(EncoderError::TokenOutOfVocab {
                token: t,
                vocab: self.vocab,
            }),
            None => Ok(()),
        }
    }

    /// `tokens` holds `rows × tokens_per_instruction` ids; returns `(rows, output_dim)`.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<'_, S>,
        tokens: &[u32],
    ) -> Result<Var, EncoderError> {
        self.check_tokens(tokens)?;
        let per = self.tokens_per_instruction();
        let rows = tokens.len() / per.max(1);
        let table = g.param(self.table);
        let zero = g.constant(Tensor::zeros(&[1, self.token_dim]));
        let full = g.tape.concat(&[zero, table], 0)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.tape.embedding(full, &ids)?;
        match &self.body {
            EmbedderBody::FeedForward(mlp) => {
                let flat = g.tape.reshape(emb, &[rows, per * self.token_dim])?;
                Ok(mlp.forward(g, flat)?)
            }
            EmbedderBody::Recurrent {
                input,
                recur,
                out,
                hidden,
            } => {
                let goal_width = self.goal_len * self.token_dim;
                let seq = g.tape.reshape(emb, &[rows, self.max_goals, goal_width])?;
                let mut h = g.constant(Tensor::zeros(&[rows, *hidden]));
                for k in 0..self.max_goals {
                    let x = g.tape.slice(seq, 1, k, k + 1)?;
                    let x = g.tape.reshape(x, &[rows, goal_width])?;
                    let pre_x = input.forward(g, x)?;
                    let pre_h = recur.forward(g, h)?;
                    let pre = g.tape.add(pre_x, pre_h)?;
                    let cand = g.tape.leaky_relu(pre, S::c(LEAKY_SLOPE));
                    // padded goals leave the state untouched
                    let keep: Vec<S> = (0..rows)
                        .flat_map(|r| {
                            let goal = &tokens
                                [r * per + k * self.goal_len..r * per + (k + 1) * self.goal_len];
                            let live = goal.iter().any(|&t| t != PAD_TOKEN);
                            std::iter::repeat_n(if live { S::one() } else { S::zero() }, *hidden)
                        })
                        .collect();
                    let keep = g.constant(Tensor::new(vec![rows, *hidden], keep)?);
                    let delta = g.tape.sub(cand, h)?;
                    let delta = g.tape.mul(delta, keep)?;
                    h = g.tape.add(h, delta)?;
                }
                Ok(out.forward(g, h)?)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.table];
        match &self.body {
            EmbedderBody::FeedForward(mlp) => ids.extend(mlp.params()),
            EmbedderBody::Recurrent {
                input, recur, out, ..
            } => {
                ids.extend(input.params());
                ids.extend(recur.params());
                ids.extend(out.params());
            }
        }
        ids
    }
}
