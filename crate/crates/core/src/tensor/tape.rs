//! Wengert-list autodiff. Every primitive application appends one node whose
//! value is computed eagerly; [`Tape::backward`] walks the list in reverse.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{matmul_at_b_into, matmul_into, transpose2};
use super::{shape_err, Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeReduction {
    /// Mean over non-ignored rows.
    Mean,
    Sum,
}

/// A differentiable operation together with its static arguments.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Same-shape sum, or bias-add of a rank-1 `[n]` onto `[.., n]`.
    Add,
    /// Same-shape elementwise product.
    Mul,
    /// Joins inputs that agree on every axis but `axis`.
    Concat { axis: usize },
    /// `start..end` along `axis`.
    Slice { axis: usize, start: usize, end: usize },
    /// Rank-2 transpose.
    Transpose,
    /// Rows of a `[V,D]` table -> `[ids.len(), D]`.
    EmbeddingGather { ids: Vec<usize> },
    Softmax { axis: usize },
    /// Normalizes the last axis; inputs are `(x, gain[D], bias[D])`.
    LayerNorm { eps: f64 },
    /// tanh approximation.
    Gelu,
    Scale { factor: f64 },
    /// Positions where `mask` is true are replaced by `value` (usually -inf).
    MaskedFill { mask: Arc<[bool]>, value: f64 },
    /// `[n,V]` logits against `n` targets -> scalar.
    CrossEntropy {
        targets: Vec<usize>,
        ignore_index: Option<usize>,
        reduction: CeReduction,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Mul,
    Concat,
    Slice,
    Transpose,
    EmbeddingGather,
    Softmax,
    LayerNorm,
    Gelu,
    Scale,
    MaskedFill,
    CrossEntropy,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 13] = [
        Self::MatMul,
        Self::Add,
        Self::Mul,
        Self::Concat,
        Self::Slice,
        Self::Transpose,
        Self::EmbeddingGather,
        Self::Softmax,
        Self::LayerNorm,
        Self::Gelu,
        Self::Scale,
        Self::MaskedFill,
        Self::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Add => "add",
            Self::Mul => "mul",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::Transpose => "transpose",
            Self::EmbeddingGather => "embedding_gather",
            Self::Softmax => "softmax",
            Self::LayerNorm => "layer_norm",
            Self::Gelu => "gelu",
            Self::Scale => "scale",
            Self::MaskedFill => "masked_fill",
            Self::CrossEntropy => "cross_entropy_from_logits",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownPrimitive(s.to_string()))
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Self::MatMul => PrimitiveKind::MatMul,
            Self::Add => PrimitiveKind::Add,
            Self::Mul => PrimitiveKind::Mul,
            Self::Concat { .. } => PrimitiveKind::Concat,
            Self::Slice { .. } => PrimitiveKind::Slice,
            Self::Transpose => PrimitiveKind::Transpose,
            Self::EmbeddingGather { .. } => PrimitiveKind::EmbeddingGather,
            Self::Softmax { .. } => PrimitiveKind::Softmax,
            Self::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Self::Gelu => PrimitiveKind::Gelu,
            Self::Scale { .. } => PrimitiveKind::Scale,
            Self::MaskedFill { .. } => PrimitiveKind::MaskedFill,
            Self::CrossEntropy { .. } => PrimitiveKind::CrossEntropy,
        }
    }
}

enum Value<'p, F> {
    Owned(Tensor<F>),
    Borrowed(&'p Tensor<F>),
}

impl<F> Value<'_, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Activations kept for the backward pass beyond the node's inputs and output.
enum Saved<F> {
    None,
    LayerNorm { mean: Vec<F>, rstd: Vec<F> },
    CrossEntropy { probs: Vec<F>, weight: F },
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Option<(Primitive, Vec<Var>)>,
    saved: Saved<F>,
    requires_grad: bool,
}

/// Recording of one forward computation. Parameters can be borrowed (`'p`)
/// so building a tape never copies model weights.
pub struct Tape<'p, F> {
    nodes: Vec<Node<'p, F>>,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Value<'p, F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_leaf(Value::Owned(value), requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'p Tensor<F>, requires_grad: bool) -> Var {
        self.push_leaf(Value::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies `prim` to `inputs`, appending one node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let (out, saved) = {
            let values: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
            forward(&prim, &values)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(out),
            op: Some((prim, inputs.to_vec())),
            saved: if requires_grad { saved } else { Saved::None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var, TensorError> {
        self.apply(Primitive::EmbeddingGather { ids }, &[table])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale { factor }, &[a])
    }

    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>, value: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::MaskedFill { mask, value }, &[a])
    }

    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        ignore_index: Option<usize>,
        reduction: CeReduction,
    ) -> Result<Var, TensorError> {
        self.apply(
            Primitive::CrossEntropy {
                targets,
                ignore_index,
                reduction,
            },
            &[logits],
        )
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor<F>>, TensorError> {
        let mut values: Vec<Tensor<F>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                None => node.value.get().clone(),
                Some((prim, inputs)) => {
                    let ins: Vec<&Tensor<F>> = inputs.iter().map(|v| &values[v.0]).collect();
                    forward(prim, &ins)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some((prim, inputs)) = &node.op else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let ins: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
            let want: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let contribs = backward(prim, &ins, node.value.get(), &node.saved, &upstream, &want);
            for ((input, contrib), wanted) in inputs.iter().zip(contribs).zip(want) {
                if !wanted {
                    continue;
                }
                if let Some(c) = contrib {
                    accumulate(&mut grads[input.0], c);
                }
            }
            grads[id] = Some(upstream);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                let shape = node.value.get().shape().to_vec();
                match g {
                    Some(g) => Some(Tensor::from_parts(shape, g)),
                    None if node.requires_grad && node.op.is_none() => Some(Tensor::zeros(&shape)),
                    None => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, contrib: Vec<F>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
    }
}

/// Gradients of a scalar with respect to every tape node that required them.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_arity(kind: PrimitiveKind, inputs: usize, expected: usize) -> Result<(), TensorError> {
    if inputs != expected {
        return Err(TensorError::Arity {
            kind: kind.name(),
            expected,
            got: inputs,
        });
    }
    Ok(())
}

/// `(outer, dim, inner)` strides for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward<F: Real>(prim: &Primitive, ins: &[&Tensor<F>]) -> Result<(Tensor<F>, Saved<F>), TensorError> {
    let kind = prim.kind();
    let name = kind.name();
    match prim {
        Primitive::MatMul => {
            check_arity(kind, ins.len(), 2)?;
            let (a, b) = (ins[0], ins[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![F::zero(); m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Ok((Tensor::from_parts(vec![m, n], out), Saved::None))
        }
        Primitive::Add => {
            check_arity(kind, ins.len(), 2)?;
            let (a, b) = (ins[0], ins[1]);
            if a.shape() == b.shape() {
                let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
            } else if b.rank() == 1 && a.rank() >= 1 && a.shape().last() == Some(&b.shape()[0]) {
                let n = b.shape()[0];
                let mut out = a.data().to_vec();
                if n > 0 {
                    for row in out.chunks_exact_mut(n) {
                        for (o, &bv) in row.iter_mut().zip(b.data()) {
                            *o += bv;
                        }
                    }
                }
                Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
            } else {
                Err(shape_err(name, format!("{:?} + {:?}", a.shape(), b.shape())))
            }
        }
        Primitive::Mul => {
            check_arity(kind, ins.len(), 2)?;
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(name, format!("{:?} * {:?}", a.shape(), b.shape())));
            }
            let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let first = ins.first().ok_or_else(|| shape_err(name, "no inputs"))?;
            if axis >= first.rank() {
                return Err(shape_err(name, format!("axis {axis} for rank {}", first.rank())));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for t in ins {
                let agrees = t.rank() == first.rank()
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !agrees {
                    return Err(shape_err(name, format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape())));
                }
                shape[axis] += t.shape()[axis];
            }
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in ins {
                    let block = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Primitive::Slice { axis, start, end } => {
            check_arity(kind, ins.len(), 1)?;
            let a = ins[0];
            let (axis, start, end) = (*axis, *start, *end);
            if axis >= a.rank() || start > end || end > a.shape()[axis] {
                return Err(shape_err(name, format!("{start}..{end} on axis {axis} of {:?}", a.shape())));
            }
            let (outer, dim, inner) = axis_split(a.shape(), axis);
            let mut shape = a.shape().to_vec();
            shape[axis] = end - start;
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                out.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Primitive::Transpose => {
            check_arity(kind, ins.len(), 1)?;
            let a = ins[0];
            if a.rank() != 2 {
                return Err(shape_err(name, format!("rank-2 input required, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Ok((Tensor::from_parts(vec![c, r], transpose2(a.data(), r, c)), Saved::None))
        }
        Primitive::EmbeddingGather { ids } => {
            check_arity(kind, ins.len(), 1)?;
            let table = ins[0];
            if table.rank() != 2 {
                return Err(shape_err(name, format!("table must be [V,D], got {:?}", table.shape())));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::Index {
                        kind: name,
                        index: id,
                        size: v,
                    });
                }
                out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            Ok((Tensor::from_parts(vec![ids.len(), d], out), Saved::None))
        }
        Primitive::Softmax { axis } => {
            check_arity(kind, ins.len(), 1)?;
            let a = ins[0];
            if *axis >= a.rank() {
                return Err(shape_err(name, format!("axis {axis} for {:?}", a.shape())));
            }
            let (outer, dim, inner) = axis_split(a.shape(), *axis);
            let mut out = vec![F::zero(); a.numel()];
            let x = a.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let max = (0..dim).map(|d| x[at(d)]).fold(F::neg_infinity(), F::max);
                    if max == F::neg_infinity() {
                        // fully masked line: leave zeros
                        continue;
                    }
                    let mut sum = F::zero();
                    for d in 0..dim {
                        let e = (x[at(d)] - max).exp();
                        out[at(d)] = e;
                        sum += e;
                    }
                    for d in 0..dim {
                        out[at(d)] /= sum;
                    }
                }
            }
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        Primitive::LayerNorm { eps } => {
            check_arity(kind, ins.len(), 3)?;
            let (x, g, b) = (ins[0], ins[1], ins[2]);
            let d = *x.shape().last().ok_or_else(|| shape_err(name, "scalar input"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(shape_err(name, format!("x {:?}, gain {:?}, bias {:?}", x.shape(), g.shape(), b.shape())));
            }
            let rows = x.numel().checked_div(d).unwrap_or(0);
            let eps = F::lit(*eps);
            let inv_d = F::one() / F::lit(d as f64);
            let mut out = vec![F::zero(); x.numel()];
            let mut means = Vec::with_capacity(rows);
            let mut rstds = Vec::with_capacity(rows);
            for (row, out_row) in x.data().chunks_exact(d.max(1)).zip(out.chunks_exact_mut(d.max(1))) {
                let mean = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                let rstd = F::one() / (var + eps).sqrt();
                for (((o, &v), &gv), &bv) in out_row.iter_mut().zip(row).zip(g.data()).zip(b.data()) {
                    *o = (v - mean) * rstd * gv + bv;
                }
                means.push(mean);
                rstds.push(rstd);
            }
            Ok((
                Tensor::from_parts(x.shape().to_vec(), out),
                Saved::LayerNorm { mean: means, rstd: rstds },
            ))
        }
        Primitive::Gelu => {
            check_arity(kind, ins.len(), 1)?;
            let a = ins[0];
            let out = a.data().iter().map(|&x| gelu(x)).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        Primitive::Scale { factor } => {
            check_arity(kind, ins.len(), 1)?;
            let a = ins[0];
            let s = F::lit(*factor);
            let out = a.data().iter().map(|&x| x * s).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        Primitive::MaskedFill { mask, value } => {
            check_arity(kind, ins.len(), 1)?;
            let a = ins[0];
            if mask.len() != a.numel() {
                return Err(shape_err(name, format!("mask of {} for {:?}", mask.len(), a.shape())));
            }
            let fill = F::lit(*value);
            let out = a
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| if m { fill } else { x })
                .collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        Primitive::CrossEntropy {
            targets,
            ignore_index,
            reduction,
        } => {
            check_arity(kind, ins.len(), 1)?;
            let logits = ins[0];
            if logits.rank() != 2 || logits.shape()[0] != targets.len() {
                return Err(shape_err(
                    name,
                    format!("logits {:?} for {} targets", logits.shape(), targets.len()),
                ));
            }
            let v = logits.shape()[1];
            let mut probs = vec![F::zero(); logits.numel()];
            let mut total = F::zero();
            let mut count = 0usize;
            for (r, (&t, row)) in targets.iter().zip(logits.rows()).enumerate() {
                if Some(t) == *ignore_index {
                    continue;
                }
                if t >= v {
                    return Err(TensorError::Index { kind: name, index: t, size: v });
                }
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                let p = &mut probs[r * v..(r + 1) * v];
                for (pi, &x) in p.iter_mut().zip(row) {
                    *pi = (x - max).exp();
                    sum += *pi;
                }
                for pi in p.iter_mut() {
                    *pi /= sum;
                }
                total += max + sum.ln() - row[t];
                count += 1;
            }
            let weight = match reduction {
                CeReduction::Sum => F::one(),
                CeReduction::Mean => {
                    if count == 0 {
                        return Err(shape_err(name, "every target is ignored"));
                    }
                    F::one() / F::lit(count as f64)
                }
            };
            Ok((Tensor::scalar(total * weight), Saved::CrossEntropy { probs, weight }))
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_K) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let th = (c * (x + k * x * x * x)).tanh();
    let half = F::lit(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * k * x * x)
}

/// Input gradients for one node. Entries for inputs with `want[i] == false`
/// may be `None`.
fn backward<F: Real>(
    prim: &Primitive,
    ins: &[&Tensor<F>],
    out: &Tensor<F>,
    saved: &Saved<F>,
    dy: &[F],
    want: &[bool],
) -> Vec<Option<Vec<F>>> {
    match prim {
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = want[0].then(|| {
                let bt = transpose2(b.data(), k, n);
                let mut da = vec![F::zero(); m * k];
                matmul_into(dy, &bt, &mut da, m, n, k);
                da
            });
            let db = want[1].then(|| {
                let mut db = vec![F::zero(); k * n];
                matmul_at_b_into(a.data(), dy, &mut db, m, k, n);
                db
            });
            vec![da, db]
        }
        Primitive::Add => {
            let (a, b) = (ins[0], ins[1]);
            let db = want[1].then(|| {
                if a.shape() == b.shape() {
                    dy.to_vec()
                } else {
                    let n = b.shape()[0];
                    let mut db = vec![F::zero(); n];
                    if n > 0 {
                        for row in dy.chunks_exact(n) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                    }
                    db
                }
            });
            vec![want[0].then(|| dy.to_vec()), db]
        }
        Primitive::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let da = want[0].then(|| dy.iter().zip(b.data()).map(|(&g, &y)| g * y).collect());
            let db = want[1].then(|| dy.iter().zip(a.data()).map(|(&g, &x)| g * x).collect());
            vec![da, db]
        }
        Primitive::Concat { axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let mut parts: Vec<Vec<F>> = ins.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (part, t) in parts.iter_mut().zip(ins) {
                    let block = t.shape()[*axis] * inner;
                    part.extend_from_slice(&dy[offset..offset + block]);
                    offset += block;
                }
            }
            parts.into_iter().zip(want).map(|(p, &w)| w.then_some(p)).collect()
        }
        Primitive::Slice { axis, start, end } => {
            let a = ins[0];
            let (outer, dim, inner) = axis_split(a.shape(), *axis);
            let mut da = vec![F::zero(); a.numel()];
            let width = (end - start) * inner;
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                da[base..base + width].copy_from_slice(&dy[o * width..(o + 1) * width]);
            }
            vec![Some(da)]
        }
        Primitive::Transpose => {
            let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            vec![Some(transpose2(dy, c, r))]
        }
        Primitive::EmbeddingGather { ids } => {
            let table = ins[0];
            let d = table.shape()[1];
            let mut dt = vec![F::zero(); table.numel()];
            for (&id, g) in ids.iter().zip(dy.chunks_exact(d.max(1))) {
                for (t, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(g) {
                    *t += gv;
                }
            }
            vec![Some(dt)]
        }
        Primitive::Softmax { axis } => {
            let (outer, dim, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![F::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let dot = (0..dim).map(|d| dy[at(d)] * y[at(d)]).sum::<F>();
                    for d in 0..dim {
                        dx[at(d)] = y[at(d)] * (dy[at(d)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::LayerNorm { .. } => {
            let Saved::LayerNorm { mean, rstd } = saved else {
                unreachable!("layer_norm node without saved statistics")
            };
            let (x, g) = (ins[0], ins[1]);
            let d = g.numel();
            let inv_d = F::one() / F::lit(d as f64);
            let mut dx = vec![F::zero(); x.numel()];
            let mut dg = vec![F::zero(); d];
            let mut db = vec![F::zero(); d];
            let mut xhat = vec![F::zero(); d];
            let mut dxhat = vec![F::zero(); d];
            for (r, ((row, gy), dxr)) in x
                .data()
                .chunks_exact(d)
                .zip(dy.chunks_exact(d))
                .zip(dx.chunks_exact_mut(d))
                .enumerate()
            {
                let (mu, rs) = (mean[r], rstd[r]);
                for j in 0..d {
                    xhat[j] = (row[j] - mu) * rs;
                    dxhat[j] = gy[j] * g.data()[j];
                    dg[j] += gy[j] * xhat[j];
                    db[j] += gy[j];
                }
                let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
                let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                for j in 0..d {
                    dxr[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }
        Primitive::Gelu => {
            let dx = ins[0].data().iter().zip(dy).map(|(&x, &g)| g * gelu_grad(x)).collect();
            vec![Some(dx)]
        }
        Primitive::Scale { factor } => {
            let s = F::lit(*factor);
            vec![Some(dy.iter().map(|&g| g * s).collect())]
        }
        Primitive::MaskedFill { mask, .. } => {
            let dx = dy
                .iter()
                .zip(mask.iter())
                .map(|(&g, &m)| if m { F::zero() } else { g })
                .collect();
            vec![Some(dx)]
        }
        Primitive::CrossEntropy {
            targets,
            ignore_index,
            ..
        } => {
            let Saved::CrossEntropy { probs, weight } = saved else {
                unreachable!("cross-entropy node without saved probabilities")
            };
            let v = ins[0].shape()[1];
            let scale = dy[0] * *weight;
            let mut dx = vec![F::zero(); probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                if Some(t) == *ignore_index {
                    continue;
                }
                let row = &mut dx[r * v..(r + 1) * v];
                for (d, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                    *d = p * scale;
                }
                row[t] -= scale;
            }
            vec![Some(dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 3.25, 4.0]));
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 100]));
        let loss = tape
            .cross_entropy(x, vec![0, 42, 99], None, CeReduction::Mean)
            .unwrap();
        assert!((tape.value(loss).item() - 100f64.ln()).abs() < 1e-12);
        assert!((tape.value(loss).item() - 4.60517).abs() < 1e-5);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.leaf(Tensor::scalar(5.0f64), true);
        let xy = tape.mul(x, y).unwrap();
        let g = tape.backward(xy).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn unreachable_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.scale(x, 4.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul: shape mismatch"), "{err}");
        assert!(err.to_string().contains("[2, 3] x [2, 3]"));
        assert!(tape.add(a, b).is_ok());
        let bias = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, bias).is_ok());
        let wrong = tape.constant(Tensor::zeros(&[2]));
        let err = tape.add(a, wrong).unwrap_err();
        assert!(err.to_string().contains("add: shape mismatch"), "{err}");
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert_eq!(
            "conv3d".parse::<PrimitiveKind>().unwrap_err(),
            TensorError::UnknownPrimitive("conv3d".into())
        );
        for kind in PrimitiveKind::ALL {
            assert_eq!(kind.name().parse::<PrimitiveKind>().unwrap(), kind);
        }
    }

    #[test]
    fn masked_positions_vanish_after_softmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
        let mask: Arc<[bool]> = vec![false, true, false, true, true, false].into();
        let filled = tape.masked_fill(x, mask.clone(), f64::NEG_INFINITY).unwrap();
        let p = tape.softmax(filled, 1).unwrap();
        for (pv, m) in tape.value(p).data().iter().zip(mask.iter()) {
            if *m {
                assert!(*pv < 1e-7);
            }
        }
        for row in tape.value(p).rows() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.2, 0.7, 0.1, -0.4]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.5, 2.0, 0.25, -1.0]).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c).unwrap();
        let e = tape.softmax(d, 1).unwrap();
        let replayed = tape.replay().unwrap();
        assert_eq!(replayed.len(), tape.len());
        for (i, v) in replayed.iter().enumerate() {
            let orig = tape.value(Var(i));
            assert!(v.data().iter().zip(orig.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let _ = e;
    }
}
