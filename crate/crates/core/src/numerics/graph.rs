//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. When at least one
//! input requires gradients the node also records how to push gradients back
//! to its inputs; `backward` walks the nodes in exact reverse order and
//! accumulates contributions, so a value used twice receives the sum of both
//! paths. All tensors are treated as matrices `[rows, cols]` where `cols` is
//! the last extent.

use super::kernels::{self, gelu, gelu_grad, softmax_row};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    MulConst(Var, Vec<T>),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    NegSqDist(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// The gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A tape that records ops for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only evaluation; nothing is recorded and no input requires gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for model parameter number `index`; its gradient is reported by
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, value: &Tensor<T>, index: usize) -> Var {
        let v = self.leaf(value.clone(), true);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], rec: Op<T>) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { rec } else { Op::Leaf },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn out_shape(&self, v: Var, cols: usize) -> Vec<usize> {
        let mut s = self.shape(v).to_vec();
        match s.last_mut() {
            Some(last) => *last = cols,
            None => s.push(cols),
        }
        s
    }

    /// `a[m×k] · b[k×n]`; `b` must be rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        if self.shape(b).len() != 2 || self.shape(b)[0] != k {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let n = self.shape(b)[1];
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = self.out_shape(a, n);
        self.push("matmul", Tensor::from_parts(shape, data), &[a, b], Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, kb) = self.dims(b);
        if kb != k {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut data = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], data),
            &[a, b],
            Op::MatMulNt(a, b),
        )
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data), &[a, b], rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the row vector `b` (numel = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(b).numel() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bb) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", Tensor::from_parts(shape, data), &[x, b], Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, &[x], Op::Scale(x, s))
    }

    /// Multiplies row `r` of `x` by the constant `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: &[T]) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if s.len() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), &[s.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, &sr) in s.iter().enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v *= sr;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("scale_rows", Tensor::from_parts(shape, data), &[x], Op::ScaleRows(x, s.to_vec()))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "mul_const",
            Tensor::from_parts(shape, data),
            &[x],
            Op::MulConst(x, c.data().to_vec()),
        )
    }

    /// Concatenation along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = self.out_shape(first, total);
        self.push("concat", Tensor::from_parts(shape, data), parts, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice", self.shape(x), &[start, len]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let shape = self.out_shape(x, len);
        self.push("slice", Tensor::from_parts(shape, data), &[x], Op::Slice { x, start })
    }

    /// Splits the last dimension into consecutive blocks of the given widths.
    pub fn split_cols(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        if widths.iter().sum::<usize>() != self.dims(x).1 {
            return Err(Error::shape("split", self.shape(x), widths));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let xv = self.value(x);
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            softmax_row(xv.row(r), &mut data[r * cols..(r + 1) * cols]);
        }
        let shape = xv.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, data), &[x], Op::Softmax(x))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::from_usize(cols).unwrap();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                data[r * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, data),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, &[x], Op::Gelu(x))
    }

    /// Rows of `table[V×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "gather: id {bad} out of range for table with {vocab} rows"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        self.push(
            "gather",
            Tensor::from_parts(vec![ids.len(), d], data),
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n = T::from_usize(va.len()).unwrap();
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        self.push("mse", Tensor::scalar(s), &[a, b], Op::Mse(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Replaces entries where `mask` is true with `fill`. A mask with one entry
    /// per column is broadcast over rows. Filled entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let full: Vec<bool> = if mask.len() == rows * cols {
            mask.to_vec()
        } else if mask.len() == cols {
            (0..rows).flat_map(|_| mask.iter().copied()).collect()
        } else {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        };
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&full)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "masked_fill",
            Tensor::from_parts(shape, data),
            &[x],
            Op::MaskedFill { x, mask: full },
        )
    }

    /// `out[i][w] = −‖z_i − e_w‖²` for `z[n×d]`, `e[V×d]`.
    pub fn neg_sq_dist(&mut self, z: Var, e: Var) -> Result<Var> {
        let (n, d) = self.dims(z);
        let (vocab, de) = self.dims(e);
        if d != de {
            return Err(Error::shape("neg_sq_dist", self.shape(z), self.shape(e)));
        }
        let data = neg_sq_dist_values(self.value(z).data(), self.value(e).data(), n, vocab, d);
        self.push(
            "neg_sq_dist",
            Tensor::from_parts(vec![n, vocab], data),
            &[z, e],
            Op::NegSqDist(z, e),
        )
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for {cols} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            softmax_row(row, &mut probs[r * cols..(r + 1) * cols]);
            if weights[r] != T::zero() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                total += weights[r] * (lse - row[targets[r]]);
            }
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Inverted dropout with the given keep mask source; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64c(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        self.mul_const(x, &mask)
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward("loss is not a node of this tape".into()));
        };
        if !node.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any value that requires gradients".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        let mut out = Gradients {
            grads: Vec::with_capacity(self.nodes.len()),
            params: Vec::new(),
        };
        for (i, (node, g)) in self.nodes.into_iter().zip(grads).enumerate() {
            let grad = match (node.requires_grad, g) {
                (true, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            };
            if let (Some(p), true) = (node.param, node.requires_grad) {
                out.params.push((p, Var(i)));
            }
            out.grads.push(grad);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    let g = slot(grads, a, m * k);
                    kernels::matmul_nt_acc(dy, val(b).data(), g, m, n, k);
                }
                if wants(b) {
                    let g = slot(grads, b, k * n);
                    kernels::matmul_tn_acc(val(a).data(), dy, g, m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if wants(a) {
                    let g = slot(grads, a, m * k);
                    kernels::matmul_acc(dy, val(b).data(), g, m, n, k);
                }
                if wants(b) {
                    let g = slot(grads, b, n * k);
                    kernels::matmul_tn_acc(dy, val(a).data(), g, m, n, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        axpy(slot(grads, v, dy.len()), T::one(), dy);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    axpy(slot(grads, a, dy.len()), T::one(), dy);
                }
                if wants(b) {
                    axpy(slot(grads, b, dy.len()), -T::one(), dy);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b).data();
                    for ((g, &d), &y) in slot(grads, a, dy.len()).iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if wants(b) {
                    let av = val(a).data();
                    for ((g, &d), &x) in slot(grads, b, dy.len()).iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if wants(x) {
                    axpy(slot(grads, x, dy.len()), T::one(), dy);
                }
                if wants(b) {
                    let cols = val(b).numel();
                    let g = slot(grads, b, cols);
                    for row in dy.chunks(cols) {
                        axpy(g, T::one(), row);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if wants(x) {
                    axpy(slot(grads, x, dy.len()), s, dy);
                }
            }
            Op::ScaleRows(x, s) => {
                if wants(*x) {
                    let cols = val(*x).cols();
                    let g = slot(grads, *x, dy.len());
                    for ((grow, drow), &sr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(s) {
                        axpy(grow, sr, drow);
                    }
                }
            }
            Op::MulConst(x, c) => {
                if wants(*x) {
                    for ((g, &d), &cv) in slot(grads, *x, dy.len()).iter_mut().zip(dy).zip(c) {
                        *g += d * cv;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let g = slot(grads, p, rows * w);
                        for r in 0..rows {
                            axpy(
                                &mut g[r * w..(r + 1) * w],
                                T::one(),
                                &dy[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice { x, start } => {
                if wants(x) {
                    let cols = val(x).cols();
                    let len = node.value.cols();
                    let g = slot(grads, x, val(x).numel());
                    for (r, drow) in dy.chunks(len).enumerate() {
                        axpy(&mut g[r * cols + start..r * cols + start + len], T::one(), drow);
                    }
                }
            }
            &Op::Softmax(x) => {
                if wants(x) {
                    let cols = node.value.cols();
                    let y = node.value.data();
                    let g = slot(grads, x, dy.len());
                    for ((grow, drow), yrow) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &yy)| d * yy).sum();
                        for ((gg, &d), &yy) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gg += yy * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                if wants(*gain) {
                    let g = slot(grads, *gain, cols);
                    for (drow, hrow) in dy.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((gg, &d), &h) in g.iter_mut().zip(drow).zip(hrow) {
                            *gg += d * h;
                        }
                    }
                }
                if wants(*bias) {
                    let g = slot(grads, *bias, cols);
                    for drow in dy.chunks(cols) {
                        axpy(g, T::one(), drow);
                    }
                }
                if wants(*x) {
                    let gv = val(*gain).data();
                    let n = T::from_usize(cols).unwrap();
                    let g = slot(grads, *x, dy.len());
                    let mut dh = vec![T::zero(); cols];
                    for (r, grow) in g.chunks_mut(cols).enumerate() {
                        let drow = &dy[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dh[j] = drow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..cols {
                            grow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if wants(x) {
                    let xv = val(x).data();
                    for ((g, &d), &xx) in slot(grads, x, dy.len()).iter_mut().zip(dy).zip(xv) {
                        *g += d * gelu_grad(xx);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = val(*table).cols();
                    let g = slot(grads, *table, val(*table).numel());
                    for (drow, &id) in dy.chunks(d).zip(ids) {
                        axpy(&mut g[id * d..(id + 1) * d], T::one(), drow);
                    }
                }
            }
            &Op::Mse(a, b) => {
                let va = val(a).data();
                let vb = val(b).data();
                let c = T::from_f64c(2.0) * dy[0] / T::from_usize(va.len()).unwrap();
                if wants(a) {
                    for ((g, &x), &y) in slot(grads, a, va.len()).iter_mut().zip(va).zip(vb) {
                        *g += c * (x - y);
                    }
                }
                if wants(b) {
                    for ((g, &x), &y) in slot(grads, b, va.len()).iter_mut().zip(va).zip(vb) {
                        *g -= c * (x - y);
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    for g in slot(grads, x, val(x).numel()).iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let n = val(x).numel();
                    let c = dy[0] / T::from_usize(n).unwrap();
                    for g in slot(grads, x, n).iter_mut() {
                        *g += c;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if wants(*x) {
                    for ((g, &d), &m) in slot(grads, *x, dy.len()).iter_mut().zip(dy).zip(mask) {
                        if !m {
                            *g += d;
                        }
                    }
                }
            }
            &Op::NegSqDist(z, e) => {
                let (n, d) = (val(z).rows(), val(z).cols());
                let vocab = val(e).rows();
                let zv = val(z).data();
                let ev = val(e).data();
                let two = T::from_f64c(2.0);
                if wants(z) {
                    let g = slot(grads, z, n * d);
                    for i in 0..n {
                        let drow = &dy[i * vocab..(i + 1) * vocab];
                        let rowsum: T = drow.iter().copied().sum();
                        let grow = &mut g[i * d..(i + 1) * d];
                        for k in 0..d {
                            grow[k] -= two * zv[i * d + k] * rowsum;
                        }
                        for (w, &dw) in drow.iter().enumerate() {
                            axpy(grow, two * dw, &ev[w * d..(w + 1) * d]);
                        }
                    }
                }
                if wants(e) {
                    let g = slot(grads, e, vocab * d);
                    for w in 0..vocab {
                        let mut colsum = T::zero();
                        let grow = &mut g[w * d..(w + 1) * d];
                        for i in 0..n {
                            let dw = dy[i * vocab + w];
                            colsum += dw;
                            axpy(grow, two * dw, &zv[i * d..(i + 1) * d]);
                        }
                        for k in 0..d {
                            grow[k] -= two * colsum * ev[w * d + k];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let cols = val(*logits).cols();
                    let g = slot(grads, *logits, probs.len());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let c = w * dy[0];
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        axpy(grow, c, &probs[r * cols..(r + 1) * cols]);
                        grow[t] -= c;
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn neg_sq_dist_values<T: Scalar>(z: &[T], e: &[T], n: usize, vocab: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * vocab];
    for i in 0..n {
        let zi = &z[i * d..(i + 1) * d];
        for w in 0..vocab {
            let ew = &e[w * d..(w + 1) * d];
            let s: T = zi.iter().zip(ew).map(|(&a, &b)| (a - b) * (a - b)).sum();
            out[i * vocab + w] = -s;
        }
    }
    out
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a node that required gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients summed per parameter index, `count` slots long. Parameters
    /// that never entered the tape come back as `None`.
    pub fn param_grads(&self, count: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        for &(p, v) in &self.params {
            if let Some(g) = self.get(v) {
                match &mut out[p] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
