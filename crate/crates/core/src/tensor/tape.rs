//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state
//! for its vector-Jacobian product. Node ids grow monotonically, so the
//! construction order is a topological order and `backward` simply walks
//! the list in reverse.

use std::sync::Arc;

use super::kernels::{self, log_sum_exp, sigmoid};
use super::value::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    MaskedSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One tape serves one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    forward_passes: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Gradient of `v`, or zeros when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            forward_passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of transformer forward passes recorded on this tape.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub(crate) fn count_forward_pass(&mut self) {
        self.forward_passes += 1;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = kernels::transpose(self.value(b).data(), n, k);
        let out = kernels::matmul(self.value(a).data(), &bt, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rc(a);
        if self.value(bias).len() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for r in 0..rows {
            add_into(&mut data[r * cols..(r + 1) * cols], b);
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::silu(x))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Silu(a), &[a])
    }

    /// Row-wise `gain ⊙ x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if self.value(gain).len() != d {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let dt = T::from_usize(d).expect("dim fits");
        let mut out = vec![T::zero(); rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mut ss = T::zero();
            for &v in row {
                ss = ss + v * v;
            }
            let inv = T::one() / (ss / dt + eps).sqrt();
            inv_rms.push(inv);
            for i in 0..d {
                out[r * d + i] = g[i] * (row[i] * inv);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary position embedding applied per head with the half-split
    /// pairing `(i, i + head_dim/2)`. `positions[r]` is the position of row r.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if positions.len() != rows || n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::shape("rope", self.shape(x), &[positions.len(), n_heads]));
        }
        let head_dim = d / n_heads;
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let inv_freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = p as f64 * inv_freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            for h in 0..n_heads {
                let base_idx = r * d + h * head_dim;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let x1 = xs[base_idx + i];
                    let x2 = xs[base_idx + i + half];
                    out[base_idx + i] = x1 * c - x2 * s;
                    out[base_idx + i + half] = x1 * s + x2 * c;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            },
            &[x],
        ))
    }

    /// Row-wise softmax of `x + mask`. Entries whose additive mask is at or
    /// below [`Scalar::mask_threshold`] come out exactly zero; the shift uses
    /// the maximum over visible entries only.
    pub fn masked_softmax(&mut self, x: Var, mask: &Arc<[T]>) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if mask.len() != rows * cols {
            return Err(Error::shape("masked_softmax", self.shape(x), &[mask.len()]));
        }
        let xs = self.value(x).data();
        let threshold = T::mask_threshold();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            let mut max = T::neg_infinity();
            let mut any = false;
            for j in 0..cols {
                if m[j] > threshold {
                    any = true;
                    max = max.max(row[j] + m[j]);
                }
            }
            if !any {
                return Err(Error::Invariant(format!(
                    "attention row {r} has no visible key"
                )));
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for j in 0..cols {
                if m[j] > threshold {
                    let e = (row[j] + m[j] - max).exp();
                    o[j] = e;
                    sum = sum + e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::MaskedSoftmax(x), &[x]))
    }

    /// Row lookup: output row r is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.rc(table);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: n,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.rc(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != d {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::matrix(rows, d, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if start + len > rows {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                size: rows,
            });
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::matrix(len, d, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if start + len > d {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                size: d,
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xs[r * d + start..r * d + start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.rc(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, v) = self.rc(logits);
        if targets.len() != rows || rows == 0 {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = &ls[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total = total + (lse - row[t]);
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::from_usize(rows).expect("row count fits");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Grads { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g, contrib),
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).1;
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    self.acc_with(grads, *a, |ga| kernels::matmul_acc(g, &bt, ga, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    self.acc_with(grads, *b, |gb| kernels::matmul_acc(&at, g, gb, k, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).0;
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    self.acc_with(grads, *a, |ga| kernels::matmul_acc(g, bv, ga, m, n, k));
                }
                if self.wants(*b) {
                    let gt = kernels::transpose(g, m, n);
                    let av = self.value(*a).data();
                    self.acc_with(grads, *b, |gb| kernels::matmul_acc(&gt, av, gb, n, m, k));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g);
                let cols = self.value(*bias).len();
                self.acc_with(grads, *bias, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc_with(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * *c;
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                self.acc_with(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        let s = sigmoid(av[i]);
                        let d = s * (T::one() + av[i] * (T::one() - s));
                        ga[i] = ga[i] + g[i] * d;
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (rows, d) = self.rc(*x);
                let xs = self.value(*x).data();
                let gs = self.value(*gain).data();
                let dt = T::from_usize(d).expect("dim fits");
                self.acc_with(grads, *x, |gx| {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = &xs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = T::zero();
                        for i in 0..d {
                            dot = dot + gr[i] * gs[i] * row[i];
                        }
                        let coef = dot * inv * inv * inv / dt;
                        for i in 0..d {
                            gx[r * d + i] = gx[r * d + i] + gr[i] * gs[i] * inv - row[i] * coef;
                        }
                    }
                });
                self.acc_with(grads, *gain, |gg| {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for i in 0..d {
                            gg[i] = gg[i] + g[r * d + i] * xs[r * d + i] * inv;
                        }
                    }
                });
            }
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            } => {
                let (rows, d) = self.rc(*x);
                let head_dim = d / n_heads;
                let half = head_dim / 2;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..rows {
                        for h in 0..*n_heads {
                            let b = r * d + h * head_dim;
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let g1 = g[b + i];
                                let g2 = g[b + i + half];
                                gx[b + i] = gx[b + i] + (g1 * c + g2 * s);
                                gx[b + i + half] = gx[b + i + half] + (g2 * c - g1 * s);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let (rows, cols) = self.rc(*x);
                let p = node.value.data();
                self.acc_with(grads, *x, |gx| {
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot = dot + pr[j] * gr[j];
                        }
                        for j in 0..cols {
                            if pr[j] != T::zero() {
                                gx[r * cols + j] = gx[r * cols + j] + pr[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.rc(*table).1;
                self.acc_with(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.rc(*x).1;
                let start = *start;
                self.acc_with(grads, *x, |gx| {
                    add_into(&mut gx[start * d..start * d + g.len()], g);
                });
            }
            Op::SliceCols { x, start } => {
                let (rows, d) = self.rc(*x);
                let len = node.value.cols();
                let start = *start;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * d + start..r * d + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.rc(p).1;
                    self.acc_with(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (rows, v) = self.rc(*logits);
                let scale = g[0] / T::from_usize(rows).expect("row count fits");
                self.acc_with(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] = gl[r * v + j] + (probs[r * v + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc_with(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v = *v + g0;
                    }
                });
            }
        }
    }
}
