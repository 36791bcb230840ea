//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; nodes are therefore
//! stored in topological order and `backward` walks them in reverse once.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::kernels;
use super::Tensor;
use crate::error::{bail, Error, Result};
use crate::segment_attention::{segment_backward, segment_forward, SegmentForward, SegmentPlan};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise combination of a matrix with one broadcast row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Query/key index sets for grouped (masked-unit or global) attention.
///
/// Group `g` lets every query row in `q[g]` attend to every row in `kv[g]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionGroups {
    pub q: Vec<Vec<usize>>,
    pub kv: Vec<Vec<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Row(RowOp, Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    ColumnStats {
        x: Var,
        /// unclamped population std per column
        raw_std: Vec<f64>,
        eps: f64,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    MovingAverage(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Rc<AttentionGroups>,
        probs: Vec<f64>,
    },
    Segment {
        q: Var,
        k: Var,
        v: Var,
        tau: Var,
        delta: Option<Var>,
        plan: SegmentPlan,
        fwd: SegmentForward,
    },
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Row(RowOp::Add, ..) => "row_add",
            Op::Row(RowOp::Sub, ..) => "row_sub",
            Op::Row(RowOp::Mul, ..) => "row_mul",
            Op::Row(RowOp::Div, ..) => "row_div",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::ColumnStats { .. } => "column_stats",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::MovingAverage(..) => "moving_average",
            Op::Attention { .. } => "attention",
            Op::Segment { .. } => "segment_correlation",
            Op::Dropout(..) => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Record of executed ops for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded non-leaf ops, in execution order.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("op `{}`", op.name())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            bail!(Dimension, "{}: shapes {:?} and {:?} differ", what, sa, sb);
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `x[i, j] (op) row[j]` for a 2-D `x` and a row of `cols` values.
    pub fn row_op(&mut self, kind: RowOp, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let rv = self.value(row);
        if rv.numel() != c {
            bail!(Dimension, "row of {} values cannot broadcast over {} columns", rv.numel(), c);
        }
        let rd = rv.data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let (a, b) = (xd[i * c + j], rd[j]);
                out[i * c + j] = match kind {
                    RowOp::Add => a + b,
                    RowOp::Sub => a - b,
                    RowOp::Mul => a * b,
                    RowOp::Div => a / b,
                };
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(Tensor::new(&[r, c], out)?, Op::Row(kind, x, row), rg)
    }

    /// `x · w + b` for `x: m×k`, `w: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.row_op(RowOp::Add, h, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let axis = x.rank() - 1;
        let out = super::ops::softmax(x, axis)?;
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalisation with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            bail!(Dimension, "layer_norm affine params must have {} entries", c);
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::new(&[r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over rows: `n×d → 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let xd = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(a), rg)
    }

    /// Per-column mean and population std of an `n×d` tensor as a `2×d`
    /// tensor (row 0 mean, row 1 std clamped below at `eps`).
    pub fn column_stats(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let xd = self.value(a).data();
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += xd[i * c + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= r as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let dv = xd[i * c + j] - mean[j];
                var[j] += dv * dv;
            }
        }
        let raw_std: Vec<f64> = var.iter().map(|v| (v / r as f64).sqrt()).collect();
        let mut out = mean;
        out.extend(raw_std.iter().map(|s| s.max(eps)));
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[2, c], out)?,
            Op::ColumnStats { x: a, raw_std, eps },
            rg,
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(bad) = index.iter().find(|&&i| i >= xd.len()) {
            bail!(Dimension, "gather index {} out of range {}", bad, xd.len());
        }
        let out = Tensor::new(shape, index.iter().map(|&i| xd[i]).collect())?;
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, index }, rg)
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            bail!(Dimension, "row {} out of range {}", bad, r);
        }
        let index: Vec<usize> = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(x, Rc::new(index), &[rows.len(), c])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                bail!(Dimension, "concat row counts {} and {} differ", r, pr);
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn moving_average(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = super::ops::moving_average(self.value(x), k)?;
        let rg = self.rg(x);
        self.push(out, Op::MovingAverage(x, k), rg)
    }

    /// Multi-head scaled dot-product attention inside index groups.
    ///
    /// `q` is `tq×c`, `k`/`v` are `tk×c`; the output has `q`'s shape and
    /// rows of `q` outside every group stay zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Rc<AttentionGroups>,
    ) -> Result<Var> {
        let (tq, c) = self.value(q).dims2()?;
        let (tk, ck) = self.value(k).dims2()?;
        self.same_shape(k, v, "attention k/v")?;
        if c != ck || heads == 0 || c % heads != 0 {
            bail!(Dimension, "attention widths q={} k={} heads={}", c, ck, heads);
        }
        if groups.q.len() != groups.kv.len() {
            bail!(Dimension, "attention group lists differ in length");
        }
        for (qg, kg) in groups.q.iter().zip(&groups.kv) {
            if kg.is_empty() || qg.iter().any(|&i| i >= tq) || kg.iter().any(|&i| i >= tk) {
                bail!(Dimension, "attention group out of range or empty");
            }
        }
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; tq * c];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (qg, kg) in groups.q.iter().zip(&groups.kv) {
            for h in 0..heads {
                let off = h * dh;
                for &qi in qg {
                    let qrow = &qd[qi * c + off..qi * c + off + dh];
                    scores.clear();
                    for &kj in kg {
                        let krow = &kd[kj * c + off..kj * c + off + dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        scores.push(s * scale);
                    }
                    kernels::softmax_in_place(&mut scores);
                    let orow = &mut out[qi * c + off..qi * c + off + dh];
                    for (&kj, &p) in kg.iter().zip(&scores) {
                        let vrow = &vd[kj * c + off..kj * c + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(&[tq, c], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            rg,
        )
    }

    /// Segment-wise correlation attention; `tau` is a 1-element tensor and
    /// `delta` (optional) holds one offset per coarsest key segment.
    pub fn segment_correlation(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        tau: Var,
        delta: Option<Var>,
        plan: SegmentPlan,
    ) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        self.same_shape(q, k, "segment q/k")?;
        self.same_shape(k, v, "segment k/v")?;
        if self.value(tau).numel() != 1 {
            bail!(Dimension, "tau must be a scalar");
        }
        let tau_v = self.value(tau).data()[0];
        let delta_v: &[f64] = match delta {
            Some(dv) => self.value(dv).data(),
            None => &[],
        };
        let fwd = segment_forward(
            &plan,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            d,
            tau_v,
            delta_v,
        )?;
        let out = Tensor::new(&[n, d], fwd.y.clone())?;
        let rg = self.rg(q)
            || self.rg(k)
            || self.rg(v)
            || self.rg(tau)
            || delta.is_some_and(|dv| self.rg(dv));
        self.push(
            out,
            Op::Segment {
                q,
                k,
                v,
                tau,
                delta,
                plan,
                fwd,
            },
            rg,
        )
    }

    /// Inverted dropout with a precomputed keep-mask already scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            bail!(Dimension, "dropout mask length mismatch");
        }
        let out = Tensor::new(
            self.value(x).shape(),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let rg = self.rg(x);
        self.push(out, Op::Dropout(x, mask), rg)
    }

    /// Reverse pass from a scalar `loss`. A tape supports one backward.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            bail!(Usage, "backward already ran on this tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if rg(*a) {
                    let bd = val(*b).data();
                    acc(*a, &mut |s| kernels::gemm(m, n, k, g, false, bd, true, s, true));
                }
                if rg(*b) {
                    let ad = val(*a).data();
                    acc(*b, &mut |s| kernels::gemm(k, m, n, ad, true, g, false, s, true));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Row(kind, x, row) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let xd = val(*x).data();
                let rd = val(*row).data();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            let gi = g[i * c + j];
                            s[i * c + j] += match kind {
                                RowOp::Add | RowOp::Sub => gi,
                                RowOp::Mul => gi * rd[j],
                                RowOp::Div => gi / rd[j],
                            };
                        }
                    }
                });
                acc(*row, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            let gi = g[i * c + j];
                            s[j] += match kind {
                                RowOp::Add => gi,
                                RowOp::Sub => -gi,
                                RowOp::Mul => gi * xd[i * c + j],
                                RowOp::Div => -gi * xd[i * c + j] / (rd[j] * rd[j]),
                            };
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kernels::gelu_grad(ad[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let od = out.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * od[i];
                    }
                });
            }
            Op::Softmax(a) => {
                let c = *out.shape().last().expect("rank >= 1");
                let od = out.data();
                acc(*a, &mut |s| {
                    for (row, (grow, srow)) in od.chunks(c).zip(g.chunks(c).zip(s.chunks_mut(c))) {
                        let dot: f64 = row.iter().zip(grow).map(|(p, gg)| p * gg).sum();
                        for j in 0..c {
                            srow[j] += row[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let gd = val(*gain).data();
                acc(*gain, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            s[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanRows(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::ColumnStats { x, raw_std, eps } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let xd = val(*x).data();
                let mean = &out.data()[..c];
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            let mut d = g[j] / r as f64;
                            if raw_std[j] > *eps {
                                d += g[c + j] * (xd[i * c + j] - mean[j]) / (r as f64 * raw_std[j]);
                            }
                            s[i * c + j] += d;
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |s| {
                for (o, &i) in index.iter().enumerate() {
                    s[i] += g[o];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::ConcatCols(parts) => {
                let r = out.shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    acc(p, &mut |s| {
                        for i in 0..r {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::MovingAverage(a, k) => {
                let (n, d) = (out.shape()[0], out.shape()[1]);
                acc(*a, &mut |s| kernels::moving_average_cols_adjoint(g, n, d, *k, s));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let c = out.shape()[1];
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = Vec::new();
                let mut pos = 0;
                for (qg, kg) in groups.q.iter().zip(&groups.kv) {
                    for h in 0..*heads {
                        let off = h * dh;
                        for &qi in qg {
                            let p = &probs[pos..pos + kg.len()];
                            pos += kg.len();
                            let grow = &g[qi * c + off..qi * c + off + dh];
                            dp.clear();
                            for (&kj, &pj) in kg.iter().zip(p) {
                                let vrow = &vd[kj * c + off..kj * c + off + dh];
                                dp.push(grow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>());
                                for e in 0..dh {
                                    dv[kj * c + off + e] += pj * grow[e];
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for (jj, &kj) in kg.iter().enumerate() {
                                let ds = p[jj] * (dp[jj] - dot) * scale;
                                for e in 0..dh {
                                    dq[qi * c + off + e] += ds * kd[kj * c + off + e];
                                    dk[kj * c + off + e] += ds * qd[qi * c + off + e];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |s| add_into(s, &dq));
                acc(*k, &mut |s| add_into(s, &dk));
                acc(*v, &mut |s| add_into(s, &dv));
            }
            Op::Segment {
                q,
                k,
                v,
                tau,
                delta,
                plan,
                fwd,
            } => {
                let (n, d) = (out.shape()[0], out.shape()[1]);
                let delta_v: &[f64] = match delta {
                    Some(dv) => val(*dv).data(),
                    None => &[],
                };
                let grads_s = segment_backward(
                    plan,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    n,
                    d,
                    val(*tau).data()[0],
                    delta_v,
                    fwd,
                    g,
                );
                acc(*q, &mut |s| add_into(s, &grads_s.dq));
                acc(*k, &mut |s| add_into(s, &grads_s.dk));
                acc(*v, &mut |s| add_into(s, &grads_s.dv));
                acc(*tau, &mut |s| s[0] += grads_s.dtau);
                if let Some(dv) = delta {
                    acc(*dv, &mut |s| add_into(s, &grads_s.ddelta));
                }
            }
            Op::Dropout(a, mask) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![0.3; 6]).unwrap().with_grad());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_runs_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0).with_grad());
        let x = tape.leaf(Tensor::scalar(5.0).with_grad());
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn trace_skips_leaves() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let m = tape.moving_average(x, 3).unwrap();
        tape.relu(m).unwrap();
        assert_eq!(tape.op_trace(), ["moving_average", "relu"]);
    }
}
