//! Reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so the append order is already a topological order and
//! [`Graph::backward`] walks it once in reverse. Leaves either own their
//! tensor or borrow it for the graph's lifetime, which lets a frozen model be
//! bound as constants without copying its parameters.

use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{dim_err, NumericsError, Result};
use crate::tensor::{dot, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SetRows {
        base: Var,
        rows: Vec<usize>,
        values: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    Stack(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    Norm(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// Trainable leaf that owns its tensor.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Trainable leaf that borrows its tensor.
    pub fn param_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push_op(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let (n, m) = xv.dims2()?;
        if rv.shape() != [1, m] {
            return Err(dim_err("add_row", format!("{n}x{m} + {:?}", rv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..n {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push_op(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        self.push_op(out, Op::Scale(x, factor), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_op(out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with a `1 × m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2()?;
        for p in [gain, bias] {
            if self.value(p).shape() != [1, m] {
                return Err(dim_err(
                    "layer_norm",
                    format!("parameter shape {:?} for width {m}", self.value(p).shape()),
                ));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            let o = out.row_slice_mut(i);
            for j in 0..m {
                let h = (row[j] - mean) * inv;
                xhat[i * m + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head causal self-attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len) × d`; rows of one sequence are
    /// contiguous and attend only to themselves and earlier rows of the same
    /// sequence. `d` is split evenly across `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(dim_err("causal_attention", "q, k and v must share a shape"));
        }
        if seq_len == 0 || n % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(dim_err(
                "causal_attention",
                format!("{n} rows, width {d}, seq_len {seq_len}, heads {heads}"),
            ));
        }
        let batch = n / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(&[n, d]);
        let od = out.data_mut();
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq_len {
                    let qrow = &qd[(b * seq_len + t) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let krow = &kd[(b * seq_len + u) * d + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[u] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut().take(t + 1) {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let pbase = ((b * heads + h) * seq_len + t) * seq_len;
                    let orow = &mut od[(b * seq_len + t) * d + off..][..dh];
                    for u in 0..=t {
                        let p = scores[u] / total;
                        probs[pbase + u] = p;
                        let vrow = &vd[(b * seq_len + u) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Selects rows of `src` by index (embedding lookup, row picking).
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (r, c) = sv.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericsError::Index {
                    what: "gather rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(sv.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push_op(
            out,
            Op::Gather {
                src,
                indices: indices.to_vec(),
            },
            &[src],
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push_op(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Copy of `base` with row `row` replaced by the `1 × m` `value`.
    pub fn set_row(&mut self, base: Var, row: usize, value: Var) -> Result<Var> {
        self.set_rows(base, &[row], value)
    }

    /// Copy of `base` with row `rows[i]` replaced by row `i` of `values`.
    /// Rows must be distinct.
    pub fn set_rows(&mut self, base: Var, rows: &[usize], values: Var) -> Result<Var> {
        let bv = self.value(base);
        let (n, m) = bv.dims2()?;
        let vv = self.value(values);
        if vv.numel() != rows.len() * m {
            return Err(dim_err(
                "set_rows",
                format!("{} rows of width {m}, values shape {:?}", rows.len(), vv.shape()),
            ));
        }
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(NumericsError::Index {
                    what: "set_rows",
                    index: r,
                    extent: n,
                });
            }
            if rows[..i].contains(&r) {
                return Err(dim_err("set_rows", format!("row {r} listed twice")));
            }
        }
        let mut out = bv.clone();
        for (i, &r) in rows.iter().enumerate() {
            out.row_slice_mut(r).copy_from_slice(&vv.data()[i * m..(i + 1) * m]);
        }
        Ok(self.push_op(
            out,
            Op::SetRows {
                base,
                rows: rows.to_vec(),
                values,
            },
            &[base, values],
        ))
    }

    /// Mean over rows of `−log softmax(logits_i)[targets_i]`, max-stabilized.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, classes) = match lv.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            other => return Err(dim_err("cross_entropy", format!("logits shape {other:?}"))),
        };
        if targets.len() != n {
            return Err(dim_err("cross_entropy", format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(NumericsError::Index {
                    what: "cross_entropy target",
                    index: t,
                    extent: classes,
                });
            }
            let row = &lv.data()[i * classes..(i + 1) * classes];
            let lse = log_sum_exp(row);
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // a winning target gives ln(1 + Σ e^{x_i − x_t}), which log1p keeps accurate near 0
            total += if row[t] == top {
                row.iter()
                    .enumerate()
                    .filter(|&(i, _)| i != t)
                    .map(|(_, &x)| (x - top).exp())
                    .sum::<f64>()
                    .ln_1p()
            } else {
                lse - row[t]
            };
            for (p, &x) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push_op(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Cosine similarity of two equal-size tensors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.numel() != bv.numel() {
            return Err(dim_err("cosine", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let norm_a = av.frobenius_norm();
        let norm_b = bv.frobenius_norm();
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(NumericsError::Degenerate {
                op: "cosine",
                detail: "zero-norm vector".into(),
            });
        }
        let c = dot(av.data(), bv.data()) / (norm_a * norm_b);
        Ok(self.push_op(Tensor::scalar(c), Op::Cosine { a, b, norm_a, norm_b }, &[a, b]))
    }

    /// Stacks one-element tensors into a `1 × n` row.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(items.len());
        for &v in items {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(dim_err("stack", format!("item of shape {:?}", t.shape())));
            }
            data.push(t.item());
        }
        Ok(self.push_op(Tensor::row(data), Op::Stack(items.to_vec()), items))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push_op(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Euclidean (Frobenius) norm as a scalar.
    pub fn norm(&mut self, x: Var) -> Var {
        let s = self.value(x).frobenius_norm();
        self.push_op(Tensor::scalar(s), Op::Norm(x), &[x])
    }

    /// Sums one-element tensors.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let stacked = self.stack(items)?;
        Ok(self.sum(stacked))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        let mut seed = lv.clone();
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        let g = if g.shape() == self.value(v).shape() {
            g
        } else {
            g.reshape(self.value(v).shape().to_vec())?
        };
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled_(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = g.matmul_tn(self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*row) {
                    self.accumulate(grads, *row, column_sums(g))?;
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.scale(*f))?,
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * gelu_grad(xi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, m) = g.dims2()?;
                let gd = g.data();
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, column_sums(g))?;
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gg[j] += gd[i * m + j] * xhat[i * m + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row(gg))?;
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut gx = Tensor::zeros(&[n, m]);
                    let mf = m as f64;
                    for i in 0..n {
                        let mut sum_gh = 0.0;
                        let mut sum_gh_h = 0.0;
                        for j in 0..m {
                            let gh = gd[i * m + j] * gain_v[j];
                            sum_gh += gh;
                            sum_gh_h += gh * xhat[i * m + j];
                        }
                        let row = gx.row_slice_mut(i);
                        for j in 0..m {
                            let gh = gd[i * m + j] * gain_v[j];
                            row[j] = inv_std[i] / mf * (mf * gh - sum_gh - xhat[i * m + j] * sum_gh_h);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, g)?;
                self.accumulate(grads, *q, gq)?;
                self.accumulate(grads, *k, gk)?;
                self.accumulate(grads, *v, gv)?;
            }
            Op::Gather { src, indices } => {
                if self.wants(*src) {
                    let (r, c) = self.value(*src).dims2()?;
                    let mut gs = Tensor::zeros(&[r, c]);
                    for (i, &idx) in indices.iter().enumerate() {
                        for (d, s) in gs.row_slice_mut(idx).iter_mut().zip(g.row_slice(i)) {
                            *d += s;
                        }
                    }
                    self.accumulate(grads, *src, gs)?;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut gx = Tensor::zeros(&[r, c]);
                    let len = g.rows();
                    gx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::SetRows { base, rows, values } => {
                if self.wants(*base) {
                    let mut gb = g.clone();
                    for &r in rows {
                        gb.row_slice_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    self.accumulate(grads, *base, gb)?;
                }
                if self.wants(*values) {
                    let mut data = Vec::with_capacity(rows.len() * g.cols());
                    for &r in rows {
                        data.extend_from_slice(g.row_slice(r));
                    }
                    let shape = self.value(*values).shape().to_vec();
                    self.accumulate(grads, *values, Tensor::new(shape, data)?)?;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let classes = probs.len() / n;
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * classes + t] -= 1.0;
                }
                gl.iter_mut().for_each(|x| *x *= scale);
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, gl)?)?;
            }
            Op::Cosine { a, b, norm_a, norm_b } => {
                let c = out.item();
                let gs = g.item();
                let av = self.value(*a);
                let bv = self.value(*b);
                let denom = norm_a * norm_b;
                if self.wants(*a) {
                    let data = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| gs * (y / denom - c * x / (norm_a * norm_a)))
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?)?;
                }
                if self.wants(*b) {
                    let data = bv
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&y, &x)| gs * (x / denom - c * y / (norm_b * norm_b)))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), data)?)?;
                }
            }
            Op::Stack(items) => {
                for (i, &v) in items.iter().enumerate() {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::new(shape, vec![g.data()[i]])?)?;
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), vec![g.item(); xv.numel()])?)?;
            }
            Op::SumSquares(x) => {
                let gs = g.item();
                self.accumulate(grads, *x, self.value(*x).scale(2.0 * gs))?;
            }
            Op::Norm(x) => {
                let n = out.item();
                let factor = if n > 0.0 { g.item() / n } else { 0.0 };
                self.accumulate(grads, *x, self.value(*x).scale(factor))?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, d) = g.dims2()?;
        let batch = n / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let gd = g.data();
        let mut gq = Tensor::zeros(&[n, d]);
        let mut gk = Tensor::zeros(&[n, d]);
        let mut gv = Tensor::zeros(&[n, d]);
        let mut gp = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq_len {
                    let pbase = ((b * heads + h) * seq_len + t) * seq_len;
                    let grow = &gd[(b * seq_len + t) * d + off..][..dh];
                    let mut weighted = 0.0;
                    for u in 0..=t {
                        let vrow = &vd[(b * seq_len + u) * d + off..][..dh];
                        gp[u] = dot(grow, vrow);
                        weighted += probs[pbase + u] * gp[u];
                        let p = probs[pbase + u];
                        let gvrow = &mut gv.data_mut()[(b * seq_len + u) * d + off..][..dh];
                        for (x, &gg) in gvrow.iter_mut().zip(grow) {
                            *x += p * gg;
                        }
                    }
                    let qrow = &qd[(b * seq_len + t) * d + off..][..dh];
                    for u in 0..=t {
                        let gs = probs[pbase + u] * (gp[u] - weighted) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * seq_len + u) * d + off..][..dh];
                        let gqrow = &mut gq.data_mut()[(b * seq_len + t) * d + off..][..dh];
                        for (x, &kk) in gqrow.iter_mut().zip(krow) {
                            *x += gs * kk;
                        }
                        let gkrow = &mut gk.data_mut()[(b * seq_len + u) * d + off..][..dh];
                        for (x, &qq) in gkrow.iter_mut().zip(qrow) {
                            *x += gs * qq;
                        }
                    }
                }
            }
        }
        Ok((gq, gk, gv))
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (n, m) = g.dims2().expect("matrix gradient");
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(g.row_slice(i)) {
            *o += x;
        }
    }
    Tensor::row(out)
}
