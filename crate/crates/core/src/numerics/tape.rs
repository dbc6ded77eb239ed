//! Reverse-mode differentiation over a linear op record.
//!
//! Every op appends one node whose inputs have strictly smaller indices, so
//! walking the node list backwards is a reverse topological order.

use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
    },
    Transpose(Var),
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    Silu(Var),
    RmsNorm {
        a: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
    Rope {
        a: Var,
        base: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner record of the ops applied in one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::Shape {
        op,
        detail: shapes
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(" vs "),
    }
}

/// Element strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `b` broadcasts over `a` iff it equals a trailing suffix of `a`'s shape.
fn broadcast_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a non-differentiable input (masks, fixed weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let needs_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale { a, .. }
            | Op::Reshape(a)
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::Softmax { a, .. }
            | Op::CausalSoftmax(a)
            | Op::Silu(a)
            | Op::RmsNorm { a, .. }
            | Op::Rope { a, .. }
            | Op::Sum(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// `a @ b`. `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// carries the same leading batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(op, &[&sa, &sb]));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared_b = sb.len() == 2;
        if bk != k || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err(op, &[&sa, &sb]));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        if shared_b {
            T::gemm(batch * m, k, n, av, (k as isize, 1), bv, b_strides, T::zero(), &mut out);
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    b_strides,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            op,
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(shape_err("transpose", &[self.shape(a)]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        let (data, shape) = permute_data(self.value(a).data(), self.shape(a), &perm);
        let value = Tensor::new(shape, data)?;
        self.push("transpose", value, Op::Transpose(a))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, NumericsError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !broadcast_suffix(sa, sb) {
            return Err(shape_err(name, &[sa, sb]));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let data: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let op = if name == "add" {
            Op::Add { a, b }
        } else {
            Op::Mul { a, b }
        };
        self.push(name, value, op)
    }

    /// Elementwise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y)
    }

    /// Elementwise product; `b` may broadcast over the leading dims of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * factor).collect())?;
        self.push("scale", value, Op::Scale { a, factor })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(NumericsError::Shape {
                op: "permute",
                detail: format!("{shape:?} by {perm:?}"),
            });
        }
        let (data, out_shape) = permute_data(self.value(a).data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumericsError::Shape {
                op: "slice",
                detail: format!("{shape:?} axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { a, axis, start })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(NumericsError::Shape {
                    op: "concat",
                    detail: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &[&first, s]));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &[&shape]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { a, axis })
    }

    /// Softmax over the last axis of `[.., t, t]` scores where row `i` only
    /// sees columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        if nd < 2 || shape[nd - 1] != shape[nd - 2] {
            return Err(shape_err("causal_softmax", &[&shape]));
        }
        let t = shape[nd - 1];
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (row_idx, (row, dst)) in src.chunks(t).zip(out.chunks_mut(t)).enumerate() {
            let visible = row_idx % t + 1;
            let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..visible {
                let e = (row[j] - max).exp();
                dst[j] = e;
                sum = sum + e;
            }
            for d in &mut dst[..visible] {
                *d = *d / sum;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("causal_softmax", value, Op::CausalSoftmax(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("silu", value, Op::Silu(a))
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis, without a learned scale.
    pub fn rms_normalize(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        if !(eps > 0.0) {
            return Err(NumericsError::InvalidArgument(format!("rms_normalize eps {eps}")));
        }
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("rms_normalize", &[&shape]))?;
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut inv_rms = Vec::with_capacity(v.numel() / d.max(1));
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let ms = row.iter().fold(T::zero(), |acc, &x| acc + x * x) / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().map(|&x| x * r));
        }
        let value = Tensor::new(shape, out)?;
        self.push("rms_normalize", value, Op::RmsNorm { a, inv_rms })
    }

    /// Gathers rows of a `[vocab, dim]` table; output shape is `shape ++ [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], shape: &[usize]) -> Result<Var, NumericsError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(NumericsError::Shape {
                op: "embedding",
                detail: format!("table {ts:?}, {} ids as {shape:?}", ids.len()),
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab) {
            return Err(NumericsError::IndexOutOfRange {
                op: "embedding",
                position: pos,
                index: *id as usize,
                bound: vocab,
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let r = id as usize * dim;
            data.extend_from_slice(&src[r..r + dim]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(dim);
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean next-token cross-entropy in nats. `logits` is `[.., vocab]` with
    /// one row per target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var, NumericsError> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| shape_err("cross_entropy", &[&shape]))?;
        let rows = self.value(logits).numel() / v.max(1);
        if rows != targets.len() || rows == 0 {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                detail: format!("logits {shape:?} vs {} targets", targets.len()),
            });
        }
        if let Some((pos, t)) = targets.iter().enumerate().find(|(_, &t)| t as usize >= v) {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                position: pos,
                index: *t as usize,
                bound: v,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = 0.0f64;
        for ((row, dst), &t) in src.chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum = sum + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
            let log_p = (row[t as usize] - max).as_f64() - sum.as_f64().ln();
            total -= log_p;
        }
        let value = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Rotary position embedding on `[.., t, d]`: the token position is the
    /// index along axis `-2`, and dims are rotated in `(i, i + d/2)` pairs.
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        if nd < 2 || shape[nd - 1] % 2 != 0 {
            return Err(shape_err("rope", &[&shape]));
        }
        let (t, d) = (shape[nd - 2], shape[nd - 1]);
        let (cos, sin) = rope_tables::<T>(t, d, base);
        let half = d / 2;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, dst)) in src.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let pos = r % t;
            for i in 0..half {
                let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                let (x1, x2) = (row[i], row[i + half]);
                dst[i] = x1 * c - x2 * s;
                dst[i + half] = x2 * c + x1 * s;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("rope", value, Op::Rope { a, base })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(total), Op::Sum(a))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>, NumericsError> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(NumericsError::Shape {
                op: "backward",
                detail: format!("output must be scalar, got {:?}", out.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumericsError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let sa = av.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = g.shape()[g.ndim() - 1];
                let batch = av.numel() / (m * k);
                let (ad, bd) = (av.data(), bv.data());
                if self.nodes[a.0].needs_grad {
                    // dA = dC @ B^T   (or dC @ B when B was used transposed)
                    let mut da = vec![T::zero(); av.numel()];
                    let b_strides = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    if *shared_b {
                        T::gemm(batch * m, n, k, gd, (n as isize, 1), bd, b_strides, T::zero(), &mut da);
                    } else {
                        for i in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                (n as isize, 1),
                                &bd[i * k * n..(i + 1) * k * n],
                                b_strides,
                                T::zero(),
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); bv.numel()];
                    let rows = if *shared_b { batch * m } else { m };
                    let count = if *shared_b { 1 } else { batch };
                    for i in 0..count {
                        let a_blk = &ad[i * rows * k..(i + 1) * rows * k];
                        let g_blk = &gd[i * rows * n..(i + 1) * rows * n];
                        let db_blk = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T @ A
                            T::gemm(n, rows, k, g_blk, (1, n as isize), a_blk, (k as isize, 1), T::zero(), db_blk);
                        } else {
                            // dB = A^T @ dC
                            T::gemm(k, rows, n, a_blk, (1, k as isize), g_blk, (n as isize, 1), T::zero(), db_blk);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Transpose(a) => {
                let nd = g.ndim();
                let mut perm: Vec<usize> = (0..nd).collect();
                perm.swap(nd - 2, nd - 1);
                let (data, shape) = permute_data(gd, g.shape(), &perm);
                self.accumulate(grads, *a, Tensor::new(shape, data)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let bs = self.shape(*b).to_vec();
                    let mut db = vec![T::zero(); bs.iter().product()];
                    let inner = db.len().max(1);
                    for (i, &x) in gd.iter().enumerate() {
                        db[i % inner] = db[i % inner] + x;
                    }
                    self.accumulate(grads, *b, Tensor::new(bs, db)?);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bt = self.value(*b);
                let bv = bt.data();
                let inner = bv.len().max(1);
                if self.nodes[a.0].needs_grad {
                    let da = gd.iter().enumerate().map(|(i, &x)| x * bv[i % inner]).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); bv.len()];
                    for (i, (&x, &y)) in gd.iter().zip(av).enumerate() {
                        db[i % inner] = db[i % inner] + x * y;
                    }
                    self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), db)?);
                }
            }
            Op::Scale { a, factor } => {
                let da = gd.iter().map(|&x| x * *factor).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(shape)?);
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (data, shape) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *a, Tensor::new(shape, data)?);
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, alen, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut da = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = o * alen * inner + start * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(shape, da)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let shape = self.shape(*v).to_vec();
                    let len = shape[*axis];
                    let mut dv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        dv.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, *v, Tensor::new(shape, dv)?);
                }
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut da = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot = (0..n).fold(T::zero(), |acc, j| acc + gd[at(j)] * y[at(j)]);
                        for j in 0..n {
                            da[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), da)?);
            }
            Op::CausalSoftmax(a) => {
                let y = node.value.data();
                let t = node.value.shape()[node.value.ndim() - 1];
                let mut da = vec![T::zero(); y.len()];
                for (r, ((yr, gr), dr)) in y.chunks(t).zip(gd.chunks(t)).zip(da.chunks_mut(t)).enumerate() {
                    let visible = r % t + 1;
                    let dot = (0..visible).fold(T::zero(), |acc, j| acc + gr[j] * yr[j]);
                    for j in 0..visible {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), da)?);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let da = x
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::RmsNorm { a, inv_rms } => {
                let y = node.value.data();
                let d = node.value.shape()[node.value.ndim() - 1];
                let dn = T::of(d as f64);
                let mut da = Vec::with_capacity(y.len());
                for ((yr, gr), &r) in y.chunks(d).zip(gd.chunks(d)).zip(inv_rms) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&y, &g)| acc + y * g) / dn;
                    da.extend(yr.iter().zip(gr).map(|(&y, &g)| r * (g - y * dot)));
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), da)?);
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let dim = ts[1];
                let mut dt = vec![T::zero(); ts[0] * dim];
                for (row, &id) in gd.chunks(dim).zip(ids) {
                    let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = *d + x;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(ts, dt)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let v = shape[shape.len() - 1];
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_mut(v).zip(targets) {
                    row[t as usize] = row[t as usize] - T::one();
                    for x in row.iter_mut() {
                        *x = *x * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dl)?);
            }
            Op::Rope { a, base } => {
                let shape = g.shape();
                let nd = shape.len();
                let (t, d) = (shape[nd - 2], shape[nd - 1]);
                let (cos, sin) = rope_tables::<T>(t, d, *base);
                let half = d / 2;
                let mut da = vec![T::zero(); gd.len()];
                for (r, (row, dst)) in gd.chunks(d).zip(da.chunks_mut(d)).enumerate() {
                    let pos = r % t;
                    for i in 0..half {
                        let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                        let (g1, g2) = (row[i], row[i + half]);
                        dst[i] = g1 * c + g2 * s;
                        dst[i + half] = g2 * c - g1 * s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), da)?);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0]));
            }
        }
        Ok(())
    }
}

/// Cos/sin tables `[t, d/2]` for rotary embeddings, computed in f64.
fn rope_tables<T: Real>(t: usize, d: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for pos in 0..t {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / d as f64);
            let angle = pos as f64 * freq;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.silu(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.25));
        let y = tape.softmax(x, 1).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let vocab = 50304;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, vocab]));
        let loss = tape.cross_entropy(x, &[0, 50303]).unwrap();
        let got = tape.value(loss).item();
        assert!((got - (vocab as f64).ln()).abs() < 1e-9);
        assert!((got - 10.826).abs() < 5e-4);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn add_rejects_non_suffix_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_ok());
    }

    #[test]
    fn non_finite_output_is_a_fault() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[1e300]));
        let err = tape.mul(a, a).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "mul" }));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 3], |i| i as f64 * 0.3));
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        assert!((v[6] + v[7] + v[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_transpose_agree() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 - 7.0));
        let b = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f64).sin()));
        let direct = tape.matmul_t(a, b).unwrap();
        let bt = tape.transpose(b).unwrap();
        let via = tape.matmul(a, bt).unwrap();
        assert_eq!(tape.shape(direct), &[2, 3, 5]);
        for (x, y) in tape.value(direct).data().iter().zip(tape.value(via).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_over_uses() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        // z = 2x^2, dz/dx = 4x
        assert_eq!(grads.wrt(x).unwrap().item(), 12.0);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(Tensor::zeros(&[4, 2]));
        let err = tape.embedding(table, &[1, 9], &[2]).unwrap_err();
        assert!(matches!(err, NumericsError::IndexOutOfRange { position: 1, index: 9, .. }));
    }
}
