use std::rc::Rc;
use std::str::FromStr;

use super::{DiffError, Tape, Var};
use crate::scalar::Real;

/// Names of the supported primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Reshape,
    Concat,
    Slice,
    Transpose,
    EmbeddingLookup,
    LeakyRelu,
    Softmax,
    Log,
    Exp,
    Mean,
    Sum,
    LayerNorm,
    MaskedFill,
    StopGradient,
    Gather,
    MinOverSet,
    Square,
}

impl FromStr for PrimitiveKind {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use PrimitiveKind::*;
        Ok(match s {
            "matmul" => MatMul,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "div" => Div,
            "scale" => Scale,
            "reshape" => Reshape,
            "concat" => Concat,
            "slice" => Slice,
            "transpose" => Transpose,
            "embedding-lookup" => EmbeddingLookup,
            "leaky-relu" => LeakyRelu,
            "softmax" => Softmax,
            "log" => Log,
            "exp" => Exp,
            "mean" => Mean,
            "sum" => Sum,
            "layer-norm" => LayerNorm,
            "masked-fill" => MaskedFill,
            "stop-gradient" => StopGradient,
            "gather" => Gather,
            "min-over-set" => MinOverSet,
            "square" => Square,
            other => return Err(DiffError::UnknownPrimitive(other.to_string())),
        })
    }
}

/// A primitive together with its attributes.
#[derive(Clone, Debug)]
pub enum Primitive<S> {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(S),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose(usize, usize),
    EmbeddingLookup(Vec<usize>),
    LeakyRelu(S),
    Softmax {
        axis: usize,
    },
    Log {
        floor: S,
    },
    Exp,
    Mean {
        axis: Option<usize>,
    },
    Sum {
        axis: Option<usize>,
    },
    LayerNorm {
        eps: S,
    },
    MaskedFill {
        mask: Rc<[bool]>,
        fill: S,
    },
    StopGradient,
    Gather(Vec<usize>),
    MinOverSet,
    Square,
}

impl<S: Real> Primitive<S> {
    pub fn kind(&self) -> PrimitiveKind {
        use Primitive as P;
        use PrimitiveKind as K;
        match self {
            P::MatMul => K::MatMul,
            P::Add => K::Add,
            P::Sub => K::Sub,
            P::Mul => K::Mul,
            P::Div => K::Div,
            P::Scale(_) => K::Scale,
            P::Reshape(_) => K::Reshape,
            P::Concat { .. } => K::Concat,
            P::Slice { .. } => K::Slice,
            P::Transpose(..) => K::Transpose,
            P::EmbeddingLookup(_) => K::EmbeddingLookup,
            P::LeakyRelu(_) => K::LeakyRelu,
            P::Softmax { .. } => K::Softmax,
            P::Log { .. } => K::Log,
            P::Exp => K::Exp,
            P::Mean { .. } => K::Mean,
            P::Sum { .. } => K::Sum,
            P::LayerNorm { .. } => K::LayerNorm,
            P::MaskedFill { .. } => K::MaskedFill,
            P::StopGradient => K::StopGradient,
            P::Gather(_) => K::Gather,
            P::MinOverSet => K::MinOverSet,
            P::Square => K::Square,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div => Some(2),
            Primitive::Concat { .. } | Primitive::MinOverSet => None,
            _ => Some(1),
        }
    }
}

/// Applies `prim` to `inputs` on `tape`, recording a node whenever an input requires gradients.
pub fn apply_primitive<S: Real>(
    tape: &mut Tape<S>,
    prim: &Primitive<S>,
    inputs: &[Var],
) -> Result<Var, DiffError> {
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(DiffError::InvalidArgument {
                op: "apply_primitive",
                msg: format!("{:?} takes {n} inputs, got {}", prim.kind(), inputs.len()),
            });
        }
    }
    let x = inputs.first().copied().ok_or(DiffError::InvalidArgument {
        op: "apply_primitive",
        msg: "no inputs".into(),
    })?;
    match prim {
        Primitive::MatMul => tape.matmul(x, inputs[1]),
        Primitive::Add => tape.add(x, inputs[1]),
        Primitive::Sub => tape.sub(x, inputs[1]),
        Primitive::Mul => tape.mul(x, inputs[1]),
        Primitive::Div => tape.div(x, inputs[1]),
        Primitive::Scale(c) => Ok(tape.scale(x, *c)),
        Primitive::Reshape(shape) => tape.reshape(x, shape),
        Primitive::Concat { axis } => tape.concat(inputs, *axis),
        Primitive::Slice { axis, start, end } => tape.slice(x, *axis, *start, *end),
        Primitive::Transpose(d0, d1) => tape.transpose(x, *d0, *d1),
        Primitive::EmbeddingLookup(ids) => tape.embedding(x, ids),
        Primitive::LeakyRelu(slope) => Ok(tape.leaky_relu(x, *slope)),
        Primitive::Softmax { axis } => tape.softmax(x, *axis),
        Primitive::Log { floor } => Ok(tape.log(x, *floor)),
        Primitive::Exp => Ok(tape.exp(x)),
        Primitive::Mean { axis } => tape.mean(x, *axis),
        Primitive::Sum { axis } => tape.sum(x, *axis),
        Primitive::LayerNorm { eps } => tape.layer_norm(x, *eps),
        Primitive::MaskedFill { mask, fill } => tape.masked_fill(x, mask.clone(), *fill),
        Primitive::StopGradient => Ok(tape.stop_gradient(x)),
        Primitive::Gather(idx) => tape.gather(x, idx),
        Primitive::MinOverSet => tape.min_over_set(inputs),
        Primitive::Square => Ok(tape.square(x)),
    }
}
