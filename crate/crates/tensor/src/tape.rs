//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and a record of
//! its inputs. Because nodes can only reference earlier nodes, the tape is
//! always in topological order and [`Tape::backward`] is a single reverse
//! sweep. Gradients accumulate additively when a value feeds several ops.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::attention::{self, AttnDims};
use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }

    pub fn tape_id(self) -> u32 {
        self.tape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Square,
    Abs,
    Sqrt,
}

#[derive(Debug)]
struct AttentionRecord {
    q: usize,
    keys: Vec<usize>,
    values: Vec<usize>,
    dims: AttnDims,
    mask: Option<Vec<bool>>,
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    AddRow(usize, usize),
    MulScalarVar(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    SmoothL1(usize, f64),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Attention(Box<AttentionRecord>),
}

impl Op {
    fn aux_len(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            Op::Attention(rec) => rec.probs.len(),
            _ => 0,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations and their values.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Collapse `shape` around `axis` into `(outer, n, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `f64` values held by operation outputs and their saved
    /// backward state. Leaves (parameters, inputs, constants) are excluded.
    pub fn activation_len(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel() + n.op.aux_len())
            .sum()
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && (v.idx as usize) < self.nodes.len()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if self.owns(v) {
            Ok(v.idx as usize)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(self.owns(v), "variable does not belong to this tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx as usize].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    ///
    /// `None` when `v` was not reached (or does not require gradients).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx as usize)?.as_deref()
    }

    /// Gradient as a tensor, zeros when unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match self.grad(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad length"),
            None => Tensor::zeros(value.shape().to_vec()),
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(TensorError::Shape {
                op,
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    // ----- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        self.push("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        self.push(name, out, op(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum)
    }

    /// `a[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(row)?);
        let (m, n) = self.val(ia).dims2("add_row")?;
        if self.val(ib).numel() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.val(ia).shape().to_vec(),
                rhs: self.val(ib).shape().to_vec(),
            });
        }
        let mut data = self.val(ia).data().to_vec();
        let r = self.val(ib).data();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let out = Tensor::new([m, n], data)?;
        self.push("add_row", out, Op::AddRow(ia, ib), &[ia, ib])
    }

    /// `a * s` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let Some(sv) = self.val(is).item() else {
            return Err(TensorError::Shape {
                op: "mul_scalar_var",
                lhs: self.val(ia).shape().to_vec(),
                rhs: self.val(is).shape().to_vec(),
            });
        };
        let data = self.val(ia).data().iter().map(|x| x * sv).collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        self.push("mul_scalar_var", out, Op::MulScalarVar(ia, is), &[ia, is])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let data = self.val(ia).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        self.push("scale", out, Op::Scale(ia, c), &[ia])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let data = self.val(ia).data().iter().map(|x| x + c).collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        self.push("add_scalar", out, Op::Shift(ia), &[ia])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let ia = self.check(a)?;
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
        };
        let data = self.val(ia).data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        self.push("unary", out, Op::Unary(ia, kind), &[ia])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    /// Elementwise smooth-L1 (Huber with threshold `beta`) of `a`.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .map(|&x| {
                let ax = x.abs();
                if ax < beta {
                    0.5 * x * x / beta
                } else {
                    ax - 0.5 * beta
                }
            })
            .collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        self.push("smooth_l1", out, Op::SmoothL1(ia, beta), &[ia])
    }

    fn softmax_like(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let ia = self.check(a)?;
        let shape = self.val(ia).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: name,
                axis,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(TensorError::Empty { op: name, shape });
        }
        let x = self.val(ia).data();
        let mut out = vec![0.0; x.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = x[(o * n + j) * inner + i];
                }
                let r = if log {
                    kernels::log_softmax(&buf)
                } else {
                    kernels::softmax(&buf)
                };
                for (j, v) in r.into_iter().enumerate() {
                    out[(o * n + j) * inner + i] = v;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let op = if log {
            Op::LogSoftmax { x: ia, axis }
        } else {
            Op::Softmax { x: ia, axis }
        };
        self.push(name, out, op, &[ia])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_like(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_like(a, axis, true)
    }

    /// Normalise over the last axis with epsilon `1e-5`, then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.layer_norm_eps(x, gamma, beta, 1e-5)
    }

    pub fn layer_norm_eps(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.val(ix).shape().to_vec();
        let n = *shape.last().unwrap_or(&0);
        if shape.is_empty() || n < 1 {
            return Err(TensorError::Empty {
                op: "layer_norm",
                shape,
            });
        }
        for p in [ig, ib] {
            if self.val(p).numel() != n {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.val(p).shape().to_vec(),
                });
            }
        }
        let rows = self.val(ix).numel() / n;
        let xd = self.val(ix).data();
        let (g, b) = (self.val(ig).data(), self.val(ib).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        if ![ix, ig, ib].iter().any(|&i| self.nodes[i].requires_grad) {
            xhat = Vec::new();
            inv_std = Vec::new();
        }
        let op = Op::LayerNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, op, &[ix, ig, ib])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2("transpose")?;
        let x = self.val(ia).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let out = Tensor::new([n, m], out)?;
        self.push("transpose", out, Op::Transpose(ia), &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(ia), &[ia])
    }

    /// Stack rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty {
                op: "concat_rows",
                shape: vec![],
            });
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let (_, cols) = self.val(idx[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let (r, c) = self.val(i).dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.val(idx[0]).shape().to_vec(),
                    rhs: self.val(i).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.val(i).data());
        }
        let out = Tensor::new([rows, cols], data)?;
        let inputs = idx.clone();
        self.push("concat_rows", out, Op::ConcatRows(idx), &inputs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let data = self.val(ia).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new([len, n], data)?;
        self.push("slice_rows", out, Op::SliceRows { x: ia, start }, &[ia])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let x = self.val(ia).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new([m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x: ia, start }, &[ia])
    }

    /// Select rows by index (repeats allowed); used for embedding lookup.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2("gather_rows")?;
        let x = self.val(ia).data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &r in indices {
            if r >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        let out = Tensor::new([indices.len(), n], data)?;
        let op = Op::GatherRows {
            x: ia,
            indices: indices.to_vec(),
        };
        self.push("gather_rows", out, op, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.val(ia).numel();
        if n == 0 {
            return Err(TensorError::Empty {
                op: "mean",
                shape: self.val(ia).shape().to_vec(),
            });
        }
        let s = self.val(ia).data().iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(ia), &[ia])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `lq×d`. Keys and values are given as lists of row blocks
    /// (`r_i×d` each) that are attended to as if stacked; `mask`, when given,
    /// has one entry per stacked key row (`false` = excluded).
    pub fn attention(
        &mut self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let iq = self.check(q)?;
        let ik = keys.iter().map(|&k| self.check(k)).collect::<Result<Vec<_>>>()?;
        let iv = values.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let (lq, d) = self.val(iq).dims2("attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: width {d} not divisible into {heads} heads"
            )));
        }
        if ik.len() != iv.len() || ik.is_empty() {
            return Err(TensorError::Invalid(
                "attention: key and value block lists must be non-empty and of equal length".into(),
            ));
        }
        let mut s = 0;
        for (&k, &v) in ik.iter().zip(&iv) {
            let (rk, ck) = self.val(k).dims2("attention")?;
            let (rv, cv) = self.val(v).dims2("attention")?;
            if ck != d || cv != d || rk != rv {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: self.val(k).shape().to_vec(),
                    rhs: self.val(v).shape().to_vec(),
                });
            }
            s += rk;
        }
        if let Some(m) = mask {
            if m.len() != s {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: vec![m.len()],
                    rhs: vec![s],
                });
            }
        }
        let dims = AttnDims { lq, s, d, heads };
        let kbuf = self.stacked(&ik);
        let vbuf = self.stacked(&iv);
        let (out, probs) = attention::forward(self.val(iq).data(), &kbuf, &vbuf, dims, mask);
        drop((kbuf, vbuf));
        let out = Tensor::new([lq, d], out)?;
        let mut inputs = vec![iq];
        inputs.extend(&ik);
        inputs.extend(&iv);
        // Probabilities are backward state; inference does not keep them.
        let probs = if inputs.iter().any(|&i| self.nodes[i].requires_grad) { probs } else { Vec::new() };
        let rec = AttentionRecord {
            q: iq,
            keys: ik,
            values: iv,
            dims,
            mask: mask.map(<[bool]>::to_vec),
            probs,
        };
        self.push("attention", out, Op::Attention(Box::new(rec)), &inputs)
    }

    /// Attention probabilities (`heads×lq×s`) saved by an attention node.
    /// Only nodes that take part in differentiation keep them.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.idx as usize)?.op {
            Op::Attention(rec) if !rec.probs.is_empty() => Some(&rec.probs),
            _ => None,
        }
    }

    pub fn attention_mask(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes.get(v.idx as usize)?.op {
            Op::Attention(rec) => rec.mask.as_deref(),
            _ => None,
        }
    }

    fn stacked(&self, idx: &[usize]) -> Cow<'_, [f64]> {
        if idx.len() == 1 {
            Cow::Borrowed(self.val(idx[0]).data())
        } else {
            Cow::Owned(idx.iter().flat_map(|&i| self.val(i).data().iter().copied()).collect())
        }
    }

    // ----- reverse pass ---------------------------------------------------

    /// Populate gradients of the scalar `loss` for every node that requires them.
    ///
    /// Calling again replaces the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.val(il).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.val(il).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[il].requires_grad {
            grads[il] = Some(vec![1.0]);
        }
        for idx in (0..=il).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(grads[i].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2("matmul").unwrap();
                let n = self.val(*b).shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, self.val(*b).data(), true, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, self.val(*a).data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for (i, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(gi) = self.acc(grads, i) {
                        gi.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (i, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(gi) = self.acc(grads, i) {
                        gi.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / vb[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * va[j] / (vb[j] * vb[j]);
                    }
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if pick_a[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        if !pick_a[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *r) {
                    let n = gr.len();
                    for (j, y) in g.iter().enumerate() {
                        gr[j % n] += y;
                    }
                }
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.val(*s).data()[0];
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * sv);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    let va = self.val(*a).data();
                    gs[0] += g.iter().zip(va).map(|(y, x)| y * x).sum::<f64>();
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Unary(a, kind) => {
                let x = self.val(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        let d = match kind {
                            Unary::Gelu => kernels::gelu_grad(x[j]),
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Exp => out[j],
                            Unary::Ln => 1.0 / x[j],
                            Unary::Square => 2.0 * x[j],
                            Unary::Abs => x[j].signum() * (x[j] != 0.0) as u8 as f64,
                            Unary::Sqrt => 0.5 / out[j],
                        };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::SmoothL1(a, beta) => {
                let x = self.val(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        let d = if x[j].abs() < *beta {
                            x[j] / beta
                        } else {
                            x[j].signum()
                        };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            if log {
                                // dx = g − softmax · Σg
                                let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                                for j in 0..n {
                                    gx[at(j)] += g[at(j)] - out[at(j)].exp() * gs;
                                }
                            } else {
                                // dx = y ⊙ (g − Σ g⊙y)
                                let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                                for j in 0..n {
                                    gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.val(*gamma).numel();
                let rows = g.len() / n;
                let gam = self.val(*gamma).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += k * (n as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.val(*a).dims2("transpose").unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.val(*x).shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    let base = start * n;
                    gx[base..base + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.val(*x).dims2("slice_cols").unwrap();
                let len = g.len() / m.max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let n = self.val(*x).shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &r) in indices.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[k * n + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += c);
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let dims = rec.dims;
        let kbuf = self.stacked(&rec.keys);
        let vbuf = self.stacked(&rec.values);
        let mut dq = vec![0.0; dims.lq * dims.d];
        let mut dk = vec![0.0; dims.s * dims.d];
        let mut dv = vec![0.0; dims.s * dims.d];
        attention::backward(
            self.val(rec.q).data(),
            &kbuf,
            &vbuf,
            &rec.probs,
            g,
            dims,
            &mut dq,
            &mut dk,
            &mut dv,
        );
        if let Some(gq) = self.acc(grads, rec.q) {
            gq.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
        }
        for (blocks, dbuf) in [(&rec.keys, &dk), (&rec.values, &dv)] {
            let mut off = 0;
            for &b in blocks.iter() {
                let len = self.val(b).numel();
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(&dbuf[off..off + len]).for_each(|(a, x)| *a += x);
                }
                off += len;
            }
        }
    }
}
