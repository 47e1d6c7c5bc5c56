use std::rc::Rc;

use super::{DiffError, Tensor};
use crate::scalar::{Real, View};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, factor: S },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Transpose { a: usize, d0: usize, d1: usize },
    Embedding { table: usize, ids: Vec<usize> },
    LeakyRelu { a: usize, slope: S },
    Softmax { a: usize, axis: usize },
    Log { a: usize, floor: S },
    Exp { a: usize },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    LayerNorm { a: usize, inv_std: Vec<S> },
    MaskedFill { a: usize, mask: Rc<[bool]> },
    Gather { a: usize, idx: Vec<usize> },
    MinOverSet { parts: Vec<usize>, argmin: Vec<u32> },
    Square { a: usize },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s that required them.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so the node list is
/// already a topological order of the graph.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swaps axes `d0` and `d1` of a row-major buffer.
fn swap_axes<S: Copy + Default>(data: &[S], shape: &[usize], d0: usize, d1: usize) -> Vec<S> {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(d0, d1);
    let mut out = vec![S::default(); data.len()];
    let rank = shape.len();
    if rank == 0 {
        out.copy_from_slice(data);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // increment the output multi-index, tracking the matching input offset
        let mut k = rank;
        while k > 0 {
            k -= 1;
            idx[k] += 1;
            src += perm_strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            src -= perm_strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    out
}

fn matmul_kernel<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm(m, k, n, View::rows(a, k), View::rows(b, n), out, n);
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, value: S) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Non-differentiable results do not need their recipe.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    // ----- binary elementwise with trailing-suffix expansion of the right operand -----

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) || self.value(b).numel() == 1 && sb.iter().all(|&d| d == 1) {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, DiffError> {
        self.check_suffix(name, a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let m = bd.len();
        let data: Vec<S> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % m]))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square { a: a.0 }, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push(value, Op::Exp { a: a.0 }, &[a.0])
    }

    /// `ln(max(x, floor))`; with `floor = 0` this is the plain logarithm.
    pub fn log(&mut self, a: Var, floor: S) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(value, Op::Log { a: a.0, floor }, &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let value = self
            .value(a)
            .map(|x| if x >= S::zero() { x } else { x * slope });
        self.push(value, Op::LeakyRelu { a: a.0, slope }, &[a.0])
    }

    /// Forward identity that blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.leaf(value, false)
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a: a.0 }, &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            value,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
            &[a.0],
        ))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                msg: format!("axes ({d0}, {d1}) for shape {shape:?}"),
            });
        }
        let data = swap_axes(self.data(a), &shape, d0, d1);
        let mut out_shape = shape;
        out_shape.swap(d0, d1);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Transpose { a: a.0, d0, d1 }, &[a.0]))
    }

    // ----- linear algebra -----

    /// `(.., m, k) · (k, n)` with a shared right operand, or `(.., m, k) · (.., k, n)` batched
    /// over identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            matmul_kernel(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Rows of `table` (shape `(vocab, dim)`) selected by `ids`; result `(ids.len(), dim)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(DiffError::InvalidArgument {
                op: "embedding",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (vocab, dim) = (shape[0], shape[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(DiffError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Picks one entry of the last axis per leading position.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or(DiffError::InvalidArgument {
            op: "gather",
            msg: "rank-0 input".into(),
        })?;
        let rows = self.value(a).numel() / last.max(1);
        if idx.len() != rows {
            return Err(DiffError::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= last {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    extent: last,
                });
            }
            data.push(src[r * last + i]);
        }
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Gather {
                a: a.0,
                idx: idx.to_vec(),
            },
            &[a.0],
        ))
    }

    // ----- reductions and normalizations -----

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), DiffError> {
        if axis < self.shape(a).len() {
            Ok(())
        } else {
            Err(DiffError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape(a)),
            })
        }
    }

    fn reduce(&self, a: Var, axis: Option<usize>) -> Tensor<S> {
        let src = self.data(a);
        match axis {
            None => Tensor::scalar(src.iter().copied().sum()),
            Some(ax) => {
                let shape = self.shape(a);
                let (outer, len, inner) = split_axis(shape, ax);
                let mut out = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                let mut s = shape.to_vec();
                s.remove(ax);
                Tensor::new(s, out).expect("reduced shape")
            }
        }
    }

    /// Sum over `axis`, or over every element when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        if let Some(ax) = axis {
            self.check_axis("sum", a, ax)?;
        }
        let value = self.reduce(a, axis);
        Ok(self.push(value, Op::Sum { a: a.0, axis }, &[a.0]))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        if let Some(ax) = axis {
            self.check_axis("mean", a, ax)?;
        }
        let count = match axis {
            None => self.value(a).numel(),
            Some(ax) => self.shape(a)[ax],
        };
        let inv = S::one() / S::c(count.max(1) as f64);
        let value = self.reduce(a, axis).map(|x| x * inv);
        Ok(self.push(value, Op::Mean { a: a.0, axis }, &[a.0]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = S::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[at(l)]);
                }
                let mut total = S::zero();
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { a: a.0, axis }, &[a.0]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or(DiffError::InvalidArgument {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let src = self.data(a);
        let rows = src.len() / width.max(1);
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let inv_n = S::one() / S::c(width as f64);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<S>() * inv_n;
            let is = S::one() / (var + eps).sqrt();
            for (o, &x) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { a: a.0, inv_std }, &[a.0]))
    }

    /// Replaces entries where `mask` is set with `fill`; `mask` covers a trailing suffix of the
    /// input shape and repeats over the leading dimensions.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<[bool]>, fill: S) -> Result<Var, DiffError> {
        let n = self.value(a).numel();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(DiffError::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let m = mask.len();
        let data: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % m] { fill } else { x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MaskedFill { a: a.0, mask }, &[a.0]))
    }

    /// Elementwise minimum across same-shaped inputs. The subgradient goes to the attained
    /// minimum, ties resolved toward the lowest input index.
    pub fn min_over_set(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::InvalidArgument {
            op: "min_over_set",
            msg: "no inputs".into(),
        })?;
        let shape = self.shape(first).to_vec();
        for p in parts {
            if self.shape(*p) != shape.as_slice() {
                return Err(DiffError::ShapeMismatch {
                    op: "min_over_set",
                    lhs: shape,
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let n = self.value(first).numel();
        let mut data = self.data(first).to_vec();
        let mut argmin = vec![0u32; n];
        for (j, p) in parts.iter().enumerate().skip(1) {
            for (i, &x) in self.data(*p).iter().enumerate() {
                if x < data[i] {
                    data[i] = x;
                    argmin[i] = j as u32;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            value,
            Op::MinOverSet {
                parts: ids.clone(),
                argmin,
            },
            &ids,
        ))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `root`. Reused inputs accumulate (sum) their contributions.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>, DiffError> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(DiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        fn acc<S: Real>(grads: &mut [Option<Vec<S>>], i: usize, n: usize, f: impl Fn(usize) -> S) {
            let buf = grads[i].get_or_insert_with(|| vec![S::zero(); n]);
            for (j, b) in buf.iter_mut().enumerate() {
                *b += f(j);
            }
        }
        let numel = |i: usize| nodes[i].value.numel();
        let val = |i: usize| nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -S::one()
                } else {
                    S::one()
                };
                if wants(*a) {
                    acc(grads, *a, numel(*a), |j| g[j]);
                }
                if wants(*b) {
                    let m = numel(*b);
                    let buf = grads[*b].get_or_insert_with(|| vec![S::zero(); m]);
                    for (j, &gj) in g.iter().enumerate() {
                        buf[j % m] += sign * gj;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                if wants(*a) {
                    acc(grads, *a, numel(*a), |j| g[j] * bv[j % m]);
                }
                if wants(*b) {
                    let buf = grads[*b].get_or_insert_with(|| vec![S::zero(); m]);
                    for (j, &gj) in g.iter().enumerate() {
                        buf[j % m] += gj * av[j];
                    }
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                if wants(*a) {
                    acc(grads, *a, numel(*a), |j| g[j] / bv[j % m]);
                }
                if wants(*b) {
                    let buf = grads[*b].get_or_insert_with(|| vec![S::zero(); m]);
                    for (j, &gj) in g.iter().enumerate() {
                        let d = bv[j % m];
                        buf[j % m] -= gj * av[j] / (d * d);
                    }
                }
            }
            Op::Scale { a, factor } => acc(grads, *a, numel(*a), |j| g[j] * *factor),
            Op::Square { a } => {
                let av = val(*a);
                acc(grads, *a, numel(*a), |j| g[j] * S::c(2.0) * av[j]);
            }
            Op::Exp { a } => {
                let y = node.value.data();
                acc(grads, *a, numel(*a), |j| g[j] * y[j]);
            }
            Op::Log { a, floor } => {
                let av = val(*a);
                acc(grads, *a, numel(*a), |j| {
                    if *floor > S::zero() && av[j] <= *floor {
                        S::zero()
                    } else {
                        g[j] / av[j]
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let av = val(*a);
                acc(grads, *a, numel(*a), |j| {
                    if av[j] >= S::zero() {
                        g[j]
                    } else {
                        g[j] * *slope
                    }
                });
            }
            Op::Reshape { a } => acc(grads, *a, numel(*a), |j| g[j]),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let n = numel(p);
                        let buf = grads[p].get_or_insert_with(|| vec![S::zero(); n]);
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (b, &s) in buf[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *b += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = nodes[*a].value.shape();
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let width = node.value.shape()[*axis];
                let n = numel(*a);
                let buf = grads[*a].get_or_insert_with(|| vec![S::zero(); n]);
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    for (b, &s) in buf[dst..dst + width * inner]
                        .iter_mut()
                        .zip(&g[o * width * inner..(o + 1) * width * inner])
                    {
                        *b += s;
                    }
                }
            }
            Op::Transpose { a, d0, d1 } => {
                let back = swap_axes(g, node.value.shape(), *d0, *d1);
                acc(grads, *a, numel(*a), |j| back[j]);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let batch = numel(*a) / (m * k).max(1);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let na = numel(*a);
                    let buf = grads[*a].get_or_insert_with(|| vec![S::zero(); na]);
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        S::gemm(
                            m,
                            n,
                            k,
                            View::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                            View::transposed(&bv[boff..boff + k * n], n),
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                            k,
                        );
                    }
                }
                if wants(*b) {
                    let nb = numel(*b);
                    let buf = grads[*b].get_or_insert_with(|| vec![S::zero(); nb]);
                    if shared {
                        S::gemm(
                            k,
                            batch * m,
                            n,
                            View::transposed(&av[..batch * m * k], k),
                            View::rows(&g[..batch * m * n], n),
                            &mut buf[..k * n],
                            n,
                        );
                    } else {
                        for bi in 0..batch {
                            S::gemm(
                                k,
                                m,
                                n,
                                View::transposed(&av[bi * m * k..(bi + 1) * m * k], k),
                                View::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                                &mut buf[bi * k * n..(bi + 1) * k * n],
                                n,
                            );
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[*table].value.shape()[1];
                let n = numel(*table);
                let buf = grads[*table].get_or_insert_with(|| vec![S::zero(); n]);
                for (r, &id) in ids.iter().enumerate() {
                    for d in 0..dim {
                        buf[id * dim + d] += g[r * dim + d];
                    }
                }
            }
            Op::Gather { a, idx } => {
                let last = *nodes[*a].value.shape().last().unwrap_or(&1);
                let n = numel(*a);
                let buf = grads[*a].get_or_insert_with(|| vec![S::zero(); n]);
                for (r, &i) in idx.iter().enumerate() {
                    buf[r * last + i] += g[r];
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let in_shape = nodes[*a].value.shape();
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    let count = axis.map_or(numel(*a), |ax| in_shape[ax]);
                    S::one() / S::c(count.max(1) as f64)
                } else {
                    S::one()
                };
                match axis {
                    None => acc(grads, *a, numel(*a), |_| g[0] * scale),
                    Some(ax) => {
                        let (_, len, inner) = split_axis(in_shape, *ax);
                        acc(grads, *a, numel(*a), |j| {
                            let o = j / (len * inner);
                            let i = j % inner;
                            g[o * inner + i] * scale
                        });
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let y = node.value.data();
                let n = numel(*a);
                let buf = grads[*a].get_or_insert_with(|| vec![S::zero(); n]);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = S::zero();
                        for l in 0..len {
                            dot += g[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            buf[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let width = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let n = numel(*a);
                let inv_n = S::one() / S::c(width as f64);
                let buf = grads[*a].get_or_insert_with(|| vec![S::zero(); n]);
                for (r, &is) in inv_std.iter().enumerate() {
                    let gy = &g[r * width..(r + 1) * width];
                    let yr = &y[r * width..(r + 1) * width];
                    let sum_g: S = gy.iter().copied().sum();
                    let sum_gy: S = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..width {
                        buf[r * width + j] += is * (gy[j] - (sum_g + yr[j] * sum_gy) * inv_n);
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                let m = mask.len();
                acc(grads, *a, numel(*a), |j| {
                    if mask[j % m] {
                        S::zero()
                    } else {
                        g[j]
                    }
                });
            }
            Op::MinOverSet { parts, argmin } => {
                for (pi, &p) in parts.iter().enumerate() {
                    if wants(p) {
                        acc(grads, p, numel(p), |j| {
                            if argmin[j] as usize == pi {
                                g[j]
                            } else {
                                S::zero()
                            }
                        });
                    }
                }
            }
        }
    }
}
