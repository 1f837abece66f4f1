//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs precede it, so walking the
//! nodes backwards visits each node after all of its consumers.

use std::borrow::Cow;

use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
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
        c: T,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        axis: usize,
        inv_std: Vec<T>,
    },
    Mean {
        a: Var,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a borrowed tensor as a differentiable leaf.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn broadcast_ok(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    /// Elementwise sum. `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("add", a, b)?;
        let vb = self.value(b);
        let value: Vec<T> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % vb.len()])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, shape, Op::Add { a, b }, rg))
    }

    /// Elementwise product. `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("multiply", a, b)?;
        let vb = self.value(b);
        let value: Vec<T> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb[i % vb.len()])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, shape, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(value, shape, Op::Scale { a, c }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, vec![m, n], Op::Matmul { a, b, m, k, n }, rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = transpose_raw(self.value(a), rows, cols);
        let rg = self.rg(&[a]);
        Ok(self.push(value, vec![cols, rows], Op::Transpose { a, rows, cols }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape.to_vec(), Op::Reshape { a }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} on axis {axis} invalid for shape {s:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let len = end - start;
        let src = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            value.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::Slice { a, axis, start }, rg))
    }

    /// Gathers rows of a 2-D tensor; rows may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("select_rows", &s, &[0, 0]));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("select_rows with no rows".into()));
        }
        let cols = s[1];
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Index {
                    index: r,
                    len: s[0],
                });
            }
            value.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            vec![rows.len(), cols],
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::of(SQRT_2_OVER_PI);
        let c = T::of(GELU_C);
        let half = T::of(0.5);
        let value = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(value, shape, Op::Gelu { a }, rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a);
        let mut value = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..n {
                    max = max.max(src[at(i)]);
                }
                let mut sum = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    value[at(i)] = e;
                    sum = sum + e;
                }
                for i in 0..n {
                    value[at(i)] = value[at(i)] / sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, s, Op::Softmax { a, axis }, rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "layer_norm axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a);
        let nf = T::of(n as f64);
        let eps = T::of(eps);
        let mut value = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| src[at(i)]).sum::<T>() / nf;
                let var = (0..n)
                    .map(|i| {
                        let d = src[at(i)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / nf;
                let inv = T::one() / (var + eps).sqrt();
                for i in 0..n {
                    value[at(i)] = (src[at(i)] - mean) * inv;
                }
                inv_std.push(inv);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, s, Op::LayerNorm { a, axis, inv_std }, rg))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let m = src.iter().copied().sum::<T>() / T::of(src.len() as f64);
        let rg = self.rg(&[a]);
        self.push(vec![m], vec![1], Op::Mean { a }, rg)
    }

    /// Mean along `axis`; the axis is kept with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "mean axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a);
        let nf = T::of(n as f64);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut acc = T::zero();
                for i in 0..n {
                    acc = acc + src[(o * n + i) * inner + j];
                }
                value[o * inner + j] = acc / nf;
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(value, shape, Op::MeanAxis { a, axis }, rg))
    }

    /// `mean((a - b)^2)`.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse_loss", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let sum = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        let m = sum / T::of(va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m], vec![1], Op::Mse { a, b }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    /// `logits` is `[batch, classes]`.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy_loss", &s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index { index: bad, len: k });
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&x| (x - max).exp()).sum::<T>();
            let log_z = max + sum.ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - log_z).exp();
            }
            total = total + (log_z - row[label]);
        }
        let loss = total / T::of(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates gradients from a one-element `loss` to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n_loss = self.nodes[loss.0].value.len();
        if n_loss != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if self.nodes[v.0].requires_grad {
                let slot =
                    grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % n] = gb[j % n] + x;
                    }
                });
            }
            Op::Mul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                acc(*a, &mut |ga| {
                    let n = vb.len();
                    for (j, &x) in g.iter().enumerate() {
                        ga[j] = ga[j] + x * vb[j % n];
                    }
                });
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % n] = gb[j % n] + x * va[j];
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + y * *c;
                }
            }),
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = self.value(*a);
                let vb = self.value(*b);
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for t in 0..k {
                            let brow = &vb[t * n..(t + 1) * n];
                            let mut s = T::zero();
                            for c in 0..n {
                                s = s + grow[c] * brow[c];
                            }
                            ga[r * k + t] = ga[r * k + t] + s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for t in 0..k {
                            let av = va[r * k + t];
                            let dst = &mut gb[t * n..(t + 1) * n];
                            for c in 0..n {
                                dst[c] = dst[c] + av * grow[c];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let gt = transpose_raw(g, *cols, *rows);
                acc(*a, &mut |ga| add_into(ga, &gt));
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = &self.nodes[a.0].shape;
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = node.shape[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut ga[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let cols = node.shape[1];
                acc(*a, &mut |ga| {
                    for (out_r, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut ga[r * cols..(r + 1) * cols],
                            &g[out_r * cols..(out_r + 1) * cols],
                        );
                    }
                });
            }
            Op::Gelu { a } => {
                let k = T::of(SQRT_2_OVER_PI);
                let c = T::of(GELU_C);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let va = self.value(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        let x = va[j];
                        let t = (k * (x + c * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
                        ga[j] = ga[j] + g[j] * d;
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let dot = (0..n).map(|i| g[at(i)] * y[at(i)]).sum::<T>();
                            for i in 0..n {
                                ga[at(i)] = ga[at(i)] + y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { a, axis, inv_std } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let nf = T::of(n as f64);
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let inv = inv_std[o * inner + j];
                            let mg = (0..n).map(|i| g[at(i)]).sum::<T>() / nf;
                            let mgy = (0..n).map(|i| g[at(i)] * y[at(i)]).sum::<T>() / nf;
                            for i in 0..n {
                                ga[at(i)] = ga[at(i)] + inv * (g[at(i)] - mg - y[at(i)] * mgy);
                            }
                        }
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                let d = g[0] / T::of(n as f64);
                acc(*a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x = *x + d;
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let (outer, n, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                let nf = T::of(n as f64);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                let idx = (o * n + i) * inner + j;
                                ga[idx] = ga[idx] + g[o * inner + j] / nf;
                            }
                        }
                    }
                });
            }
            Op::Mse { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let scale = T::of(2.0) * g[0] / T::of(va.len() as f64);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + scale * (va[j] - vb[j]);
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] - scale * (va[j] - vb[j]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = node_cols(&self.nodes[logits.0].shape);
                let scale = g[0] / T::of(labels.len() as f64);
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            gl[r * k + c] = gl[r * k + c] + scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn node_cols(shape: &[usize]) -> usize {
    shape[shape.len() - 1]
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for t in 0..k {
            let av = a[r * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for c in 0..n {
                orow[c] = orow[c] + av * brow[c];
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when it did not participate.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}
