//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose parents have smaller indices, so
//! walking the tape backwards from the loss is a reverse topological order
//! and visits each node once.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::tensor::{as_batched, batched_matmul, gemm, gemm_t, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, T),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore_index: usize, probs: Vec<T>, count: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    Skew(Var),
    MeanRows { x: Var, keep: Vec<bool>, count: usize },
    Mse { pred: Var, target: Vec<T> },
    RepeatRows { x: Var, n: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: Option<crate::Rng>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T, TensorError> {
    Err(TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `data` laid out as `shape` into the order given by `axes`.
fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    let rank = shape.len();
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Flat source index in the `[L, L]` input for output `(i, j)` of the
/// relative-attention skew: left-pad one zero column, view the padded
/// `L x (L+1)` buffer as `(L+1) x L`, and drop the first row.
fn skew_source(i: usize, j: usize, l: usize) -> Option<usize> {
    let flat = (i + 1) * l + j;
    let (row, col) = (flat / (l + 1), flat % (l + 1));
    (col > 0).then(|| row * l + col - 1)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), train: false, rng: None }
    }

    /// Training tape: dropout masks are drawn from a generator seeded here.
    pub fn training(seed: u64) -> Self {
        Self { nodes: Vec::new(), train: true, rng: Some(crate::seeded_rng(seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product over the last two dimensions. Leading dimensions must
    /// agree, or `b` may be a single matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some((ba, m, k)), Some((bb, k2, n))) = (as_batched(&sa), as_batched(&sb)) else {
            return shape_err("matmul", &sa, &sb);
        };
        if k != k2 {
            return shape_err("matmul", &sa, &sb);
        }
        let shared_rhs = sb.len() == 2 && sa.len() > 2;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let data = if shared_rhs {
            let mut c = vec![T::zero(); ba * m * n];
            gemm(self.value(a).data(), self.value(b).data(), &mut c, ba * m, k, n);
            c
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || ba != bb {
                return shape_err("matmul", &sa, &sb);
            }
            batched_matmul(self.value(a).data(), self.value(b).data(), ba, m, k, n)
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, shared_rhs }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", self.shape(a), self.shape(b));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return shape_err("add_bias", sx, sb);
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(b.len()) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Index { op: "concat", index: axis, bound: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d]) {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let (_, len, _) = around(self.shape(p), axis);
                let block = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index { op: "slice", index: axis, bound: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Index { op: "slice", index: start + len, bound: shape[axis] });
        }
        let (outer, axis_len, inner) = around(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return shape_err("split", &shape, sizes);
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Gathers entries `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index { op: "index_select", index: axis, bound: shape.len() });
        }
        let (outer, axis_len, inner) = around(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= axis_len) {
            return Err(TensorError::Index { op: "index_select", index: bad, bound: axis_len });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * axis_len + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::IndexSelect { x, axis, indices: indices.to_vec() }, &[x]))
    }

    /// Rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return shape_err("embedding", &shape, &[ids.len()]);
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Index { op: "embedding", index: bad, bound: vocab });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(&[ids.len(), dim], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes the last dimension, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = sx.last().copied().unwrap_or(0);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return shape_err("layer_norm", &sx, self.shape(p));
            }
        }
        let eps = T::from_f64(LN_EPS);
        let n = T::from_f64(d as f64);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / d.max(1);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Inverted dropout; the identity on evaluation tapes or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let rng = self.rng.as_mut().expect("training tape has a generator");
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let mut value = self.value(x).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, classes]` logits. Rows whose target equals `ignore_index`
    /// contribute nothing; with no counted rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return shape_err("cross_entropy", &shape, &[targets.len()]);
        }
        let classes = shape[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, &t) in probs.chunks_mut(classes).zip(targets) {
            if t == ignore_index {
                continue;
            }
            if t >= classes {
                return Err(TensorError::Index { op: "cross_entropy", index: t, bound: classes });
            }
            let lse = log_sum_exp(row);
            total += lse - row[t];
            count += 1;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_f64(count as f64) };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), ignore_index, probs, count };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", &shape, axes);
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err("transpose", self.shape(x), &[]);
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var, TensorError> {
        if mask.len() != self.value(x).numel() {
            return shape_err("masked_fill", self.shape(x), &[mask.len()]);
        }
        let mut value = self.value(x).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(mask) {
            if m {
                *v = fill;
            }
        }
        Ok(self.push(value, Op::MaskedFill { x, mask: mask.to_vec() }, &[x]))
    }

    /// Relative-attention skew on `[.., L, L]`. If column `c` of the input
    /// holds relative offset `c - (L - 1)`, output `(i, j)` for `j <= i`
    /// holds the input at `(i, j - i + L - 1)`. Entries above the diagonal
    /// are filler and must be masked by the caller.
    pub fn skew(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let Some((batch, l, l2)) = as_batched(&shape) else {
            return shape_err("skew", &shape, &[]);
        };
        if l != l2 {
            return shape_err("skew", &shape, &[l, l]);
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for b in 0..batch {
            let base = b * l * l;
            for i in 0..l {
                for j in 0..l {
                    if let Some(s) = skew_source(i, j, l) {
                        data[base + i * l + j] = src[base + s];
                    }
                }
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Skew(x), &[x]))
    }

    /// Mean over the rows of `[rows, d]` where `keep` is true, as `[1, d]`.
    pub fn mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != keep.len() {
            return shape_err("mean_rows", &shape, &[keep.len()]);
        }
        let d = shape[1];
        let count = keep.iter().filter(|&&k| k).count();
        let mut out = vec![T::zero(); d];
        if count > 0 {
            let inv = T::one() / T::from_f64(count as f64);
            for (row, _) in self.value(x).data().chunks(d).zip(keep).filter(|(_, &k)| k) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v * inv;
                }
            }
        }
        let value = Tensor::new(&[1, d], out)?;
        Ok(self.push(value, Op::MeanRows { x, keep: keep.to_vec(), count }, &[x]))
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var, TensorError> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return shape_err("mse", self.shape(pred), &[target.len()]);
        }
        let n = T::from_f64(p.len() as f64);
        let loss = p.iter().zip(target).fold(T::zero(), |a, (&x, &t)| a + (x - t) * (x - t)) / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }, &[pred]))
    }

    /// Repeats a `[1, d]` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != 1 {
            return shape_err("repeat_rows", &shape, &[1, shape.last().copied().unwrap_or(0)]);
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let value = Tensor::new(&[n, row.len()], data)?;
        Ok(self.push(value, Op::RepeatRows { x, n }, &[x]))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let seed_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return shape_err("backward", &seed_shape, &[1]);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&seed_shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ba, m, k) = as_batched(va.shape()).unwrap();
                let (_, _, n) = as_batched(vb.shape()).unwrap();
                if *shared_rhs {
                    let rows = ba * m;
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); rows * k];
                        gemm_t(gd, false, vb.data(), true, &mut da, rows, n, k);
                        self.accumulate(grads, *a, Tensor::new(va.shape(), da).unwrap());
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_t(va.data(), true, gd, false, &mut db, k, rows, n);
                        self.accumulate(grads, *b, Tensor::new(vb.shape(), db).unwrap());
                    }
                } else {
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); ba * m * k];
                        for bi in 0..ba {
                            let (g, b) = (&gd[bi * m * n..(bi + 1) * m * n], &vb.data()[bi * k * n..(bi + 1) * k * n]);
                            gemm_t(g, false, b, true, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                        }
                        self.accumulate(grads, *a, Tensor::new(va.shape(), da).unwrap());
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); ba * k * n];
                        for bi in 0..ba {
                            let (a, g) = (&va.data()[bi * m * k..(bi + 1) * m * k], &gd[bi * m * n..(bi + 1) * m * n]);
                            gemm_t(a, true, g, false, &mut db[bi * k * n..(bi + 1) * k * n], k, m, n);
                        }
                        self.accumulate(grads, *b, Tensor::new(vb.shape(), db).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let d = g.cols();
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[d], db).unwrap());
                }
            }
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= *s);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = around(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = shape[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(&shape, dp).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, axis_len, inner) = around(&shape, *axis);
                let len = g.shape()[*axis];
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x).to_vec();
                let (outer, axis_len, inner) = around(&shape, *axis);
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = (o * axis_len + i) * inner;
                        let src = (o * indices.len() + k) * inner;
                        for t in 0..inner {
                            d[dst + t] += gd[src + t];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let dim = shape[1];
                let mut dt = Tensor::zeros(&shape);
                let d = dt.data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    for t in 0..dim {
                        d[i * dim + t] += gd[r * dim + t];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(gd.chunks(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                let n = T::from_f64(d as f64);
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (hr, gr) in xhat.chunks(d).zip(gd.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * hr[i];
                            db[i] += gr[i];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(&[d], dg).unwrap());
                    self.accumulate(grads, *bias, Tensor::new(&[d], db).unwrap());
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((hr, gr), &r) in xhat.chunks(d).zip(gd.chunks(d)).zip(rstd) {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for i in 0..d {
                            let dh = gr[i] * gv[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[i];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        dx.extend((0..d).map(|i| r * (gr[i] * gv[i] - mean_dh - hr[i] * mean_dh_h)));
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx).unwrap());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<T> = xv.iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx).unwrap());
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<T> = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx).unwrap());
            }
            Op::CrossEntropy { logits, targets, ignore_index, probs, count } => {
                let shape = self.shape(*logits).to_vec();
                let classes = shape[1];
                let mut dl = Tensor::zeros(&shape);
                if *count > 0 {
                    let scale = gd[0] / T::from_f64(*count as f64);
                    let d = dl.data_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        let row = &mut d[r * classes..(r + 1) * classes];
                        for (o, &p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *o = p * scale;
                        }
                        row[t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (dx, shape) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::new(&shape, dx).unwrap());
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedFill { x, mask } => {
                let dx: Vec<T> = gd.iter().zip(mask).map(|(&gv, &m)| if m { T::zero() } else { gv }).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx).unwrap());
            }
            Op::Skew(x) => {
                let (batch, l, _) = as_batched(g.shape()).unwrap();
                let mut dx = Tensor::zeros(g.shape());
                let d = dx.data_mut();
                for b in 0..batch {
                    let base = b * l * l;
                    for i in 0..l {
                        for j in 0..l {
                            if let Some(s) = skew_source(i, j, l) {
                                d[base + s] += gd[base + i * l + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows { x, keep, count } => {
                let shape = self.shape(*x).to_vec();
                let d = shape[1];
                let mut dx = Tensor::zeros(&shape);
                if *count > 0 {
                    let inv = T::one() / T::from_f64(*count as f64);
                    for (row, _) in dx.data_mut().chunks_mut(d).zip(keep).filter(|(_, &k)| k) {
                        for (o, &gv) in row.iter_mut().zip(gd) {
                            *o = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = gd[0] * T::from_f64(2.0 / target.len() as f64);
                let dx: Vec<T> = p.data().iter().zip(target).map(|(&x, &t)| (x - t) * scale).collect();
                self.accumulate(grads, *pred, Tensor::new(p.shape(), dx).unwrap());
            }
            Op::RepeatRows { x, n } => {
                let d = g.cols();
                let mut dx = vec![T::zero(); d];
                for row in gd.chunks(d).take(*n) {
                    for (o, &v) in dx.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[1, d], dx).unwrap());
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_vanishes_with_gap() {
        let mut last = f64::INFINITY;
        for gap in [1.0, 5.0, 10.0, 30.0] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(&[1, 3], vec![gap, 0.0, 0.0]).unwrap());
            let l = tape.cross_entropy(x, &[0], usize::MAX).unwrap();
            let v = tape.value(l).item();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let e = tape.matmul(a, b).unwrap_err();
        assert_eq!(e.to_string(), "shape mismatch in matmul: [2, 3] vs [4, 5]");
        assert!(matches!(tape.add(a, b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn skew_matches_relative_gather() {
        let l = 5;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[l, l], |i| i as f64));
        let s = tape.skew(x).unwrap();
        let out = tape.value(s).data().to_vec();
        for i in 0..l {
            for j in 0..=i {
                assert_eq!(out[i * l + j], (i * l + (j + l - 1 - i)) as f64);
            }
        }
    }

    #[test]
    fn ignored_targets_get_exactly_zero_gradient() {
        let mut rng = crate::seeded_rng(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::randn(&[4, 6], 1.0, &mut rng));
        let l = tape.cross_entropy(x, &[1, 99, 2, 99], 99).unwrap();
        let g = tape.backward(l).unwrap();
        let gx = g.get(x).unwrap();
        assert!(gx.row(1).iter().chain(gx.row(3)).all(|&v| v == 0.0));
        assert!(gx.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn concat_split_backward_is_exact_routing() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.param(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        let parts = tape.split(c, 1, &[3, 2]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        let w = tape.constant(Tensor::from_fn(&[10, 1], |i| (i + 1) as f64));
        let flat = tape.reshape(c, &[1, 10]).unwrap();
        let s = tape.matmul(flat, w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 6.0, 7.0, 8.0]);
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 5.0, 9.0, 10.0]);
    }
}
