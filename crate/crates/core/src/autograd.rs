//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive executed through a [`Tape`] appends one node holding its
//! value and the ids of its inputs. Node ids are assigned in execution order,
//! so the tape is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep. A tape belongs to one thread; forward passes that
//! share parameters each build their own tape.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, BinaryOp, Broadcast, Interpolation, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Affine {
        x: Var,
        mul: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    NormalizeAffine {
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    ChannelMean(Var),
    Resize {
        x: Var,
        mode: Interpolation,
    },
    GlobalAvgPool(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        at: Vec<(usize, usize)>,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor,
    },
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sums a gradient shaped like the left operand down to the right operand's shape.
fn reduce_broadcast(g: &[f64], bc: Broadcast, b_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(b_shape.to_vec());
    let dst = out.data_mut();
    for (i, &v) in g.iter().enumerate() {
        dst[bc.index(i)] += v;
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let value = tensor::binary(op, self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Binary { op, a, b, bc }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).map(|v| mul * v + add);
        self.push(value, Op::Affine { x, mul }, &[x])
    }

    pub fn scale(&mut self, x: Var, mul: f64) -> Var {
        self.affine(x, mul, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, add: f64) -> Var {
        self.affine(x, 1.0, add)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = tensor::sigmoid(self.value(x));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Row-wise softmax restricted to `allowed` positions (row-major `[m, n]`).
    /// Disallowed positions get exactly zero weight. Rows with no allowed
    /// position are an error; callers apply their fallback first.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if allowed.len() != m * n {
            return Err(shape_err!("mask holds {} entries for a {}x{} matrix", allowed.len(), m, n));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let ok = &allowed[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Precondition(format!("attention row {} has no allowed key", r)));
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if ok[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MaskedSoftmaxRows(x), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with either operand read transposed.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = tensor::matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::Matmul { a, b, ta, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = tensor::transpose2d(self.value(x))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn normalize_affine(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::Precondition("normalization eps must be nonnegative".into()));
        }
        let value = tensor::normalize_affine(
            self.value(x),
            self.value(mean),
            self.value(var),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        Ok(self.push(
            value,
            Op::NormalizeAffine {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            },
            &[x, mean, var, gamma, beta],
        ))
    }

    /// `[C, ...]` → `[C]` per-channel means.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 2 {
            return Err(shape_err!("channel_mean needs [C, ...], got {:?}", t.shape()));
        }
        let (mean, _) = tensor::channel_moments(t);
        let value = Tensor::new(vec![mean.len()], mean)?;
        Ok(self.push(value, Op::ChannelMean(x), &[x]))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize, mode: Interpolation) -> Result<Var> {
        let value = tensor::resize(self.value(x), out_h, out_w, mode)?;
        Ok(self.push(value, Op::Resize { x, mode }, &[x]))
    }

    /// Upsampling; the output must be at least as large as the input.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize, mode: Interpolation) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if out_h < h || out_w < w {
            return Err(Error::Precondition(format!(
                "upsample target {}x{} is smaller than input {}x{}",
                out_h, out_w, h, w
            )));
        }
        self.resize(x, out_h, out_w, mode)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&tensors, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice(self.value(x), axis, start, len)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[M, N]` → `[M]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let data = self.value(x).data().chunks(n.max(1)).map(|r| r.iter().sum()).collect::<Vec<f64>>();
        let data = if n == 0 { vec![0.0; m] } else { data };
        let value = Tensor::new(vec![m], data)?;
        Ok(self.push(value, Op::SumRows(x), &[x]))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(shape_err!("row {} out of range for {} rows", bad, m));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks individual matrix entries into a vector.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(shape_err!("entry ({}, {}) out of range for {}x{}", r, c, m, n));
        }
        let src = self.value(x).data();
        let data = at.iter().map(|&(r, c)| src[r * n + c]).collect();
        let value = Tensor::new(vec![at.len()], data)?;
        Ok(self.push(value, Op::Pick { x, at: at.to_vec() }, &[x]))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// evaluated on logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != target.shape() {
            return Err(shape_err!("bce logits {:?} vs target {:?}", x.shape(), target.shape()));
        }
        let n = x.numel().max(1) as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            &[logits],
        ))
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err!("layer norm affine params must be [{}]", n));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let (mu, inv) = row_stats(row, eps);
            for j in 0..n {
                out[r * n + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNormRows { x, gamma, beta, eps },
            &[x, gamma, beta],
        ))
    }

    /// Reverse sweep from a single-element `loss`; leaves that require
    /// gradients receive them (accumulating over repeated calls).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                accumulate(&mut self.nodes[i].grad, g);
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(())
    }

    /// Clears gradients stored on leaves.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Binary { op, a, b, bc } => {
                let (av, bv) = (val(a), val(b));
                let gd = g.data();
                if want(a) {
                    let ga = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => Tensor::from_fn(g.shape().to_vec(), |k| gd[k] * bv.data()[bc.index(k)]),
                        BinaryOp::Div => Tensor::from_fn(g.shape().to_vec(), |k| gd[k] / bv.data()[bc.index(k)]),
                    };
                    out.push((a, ga));
                }
                if want(b) {
                    let local: Vec<f64> = match op {
                        BinaryOp::Add => gd.to_vec(),
                        BinaryOp::Sub => gd.iter().map(|v| -v).collect(),
                        BinaryOp::Mul => gd.iter().zip(av.data()).map(|(g, a)| g * a).collect(),
                        BinaryOp::Div => gd
                            .iter()
                            .zip(av.data())
                            .enumerate()
                            .map(|(k, (g, a))| {
                                let d = bv.data()[bc.index(k)];
                                -g * a / (d * d)
                            })
                            .collect(),
                    };
                    out.push((b, reduce_broadcast(&local, bc, bv.shape())));
                }
            }
            &Op::Affine { x, mul } => out.push((x, g.map(|v| v * mul))),
            &Op::Relu(x) => {
                let xv = val(x).data();
                out.push((x, Tensor::from_fn(g.shape().to_vec(), |k| if xv[k] > 0.0 { g.data()[k] } else { 0.0 })));
            }
            &Op::Sigmoid(x) => {
                let yd = y.data();
                out.push((x, Tensor::from_fn(g.shape().to_vec(), |k| g.data()[k] * yd[k] * (1.0 - yd[k]))));
            }
            &Op::Softmax { x, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot: f64 = (0..len).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                out.push((x, Tensor::new(shape.to_vec(), gx)?));
            }
            &Op::LogSoftmaxRows(x) => {
                let (m, n) = y.dims2()?;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let gs: f64 = g.data()[r * n..(r + 1) * n].iter().sum();
                    for j in 0..n {
                        let k = r * n + j;
                        gx[k] = g.data()[k] - y.data()[k].exp() * gs;
                    }
                }
                out.push((x, Tensor::new(vec![m, n], gx)?));
            }
            &Op::MaskedSoftmaxRows(x) => {
                let (m, n) = y.dims2()?;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let rs = r * n..(r + 1) * n;
                    let dot: f64 = g.data()[rs.clone()].iter().zip(&y.data()[rs]).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let k = r * n + j;
                        gx[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
                out.push((x, Tensor::new(vec![m, n], gx)?));
            }
            &Op::Matmul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if ta {
                        tensor::matmul_t(val(b), tb, g, true)?
                    } else {
                        tensor::matmul_t(g, false, val(b), !tb)?
                    };
                    out.push((a, ga));
                }
                if want(b) {
                    let gb = if tb {
                        tensor::matmul_t(g, true, val(a), ta)?
                    } else {
                        tensor::matmul_t(val(a), !ta, g, false)?
                    };
                    out.push((b, gb));
                }
            }
            &Op::Transpose(x) => out.push((x, tensor::transpose2d(g)?)),
            &Op::Conv2d { x, w, b, stride, padding } => {
                let (gx, gw, gb) = tensor::conv2d_backward(val(x), val(w), g, stride, padding)?;
                out.push((x, gx));
                out.push((w, gw));
                if let Some(b) = b {
                    out.push((b, gb));
                }
            }
            &Op::NormalizeAffine { x, mean, var, gamma, beta, eps } => {
                let xv = val(x);
                let c = xv.shape()[0];
                let inner = xv.numel() / c.max(1);
                let (mu, vr, ga) = (val(mean).data(), val(var).data(), val(gamma).data());
                let mut gx = vec![0.0; xv.numel()];
                let (mut gmu, mut gvar, mut ggamma, mut gbeta) =
                    (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                for ch in 0..c {
                    let s = (vr[ch] + eps).sqrt();
                    let scale = ga[ch] / s;
                    let (mut sg, mut sgc) = (0.0, 0.0);
                    for k in ch * inner..(ch + 1) * inner {
                        let gk = g.data()[k];
                        let centered = xv.data()[k] - mu[ch];
                        gx[k] = gk * scale;
                        sg += gk;
                        sgc += gk * centered;
                    }
                    gmu[ch] = -scale * sg;
                    gvar[ch] = -0.5 * ga[ch] * sgc / (s * s * s);
                    ggamma[ch] = sgc / s;
                    gbeta[ch] = sg;
                }
                let reshape = |v: Vec<f64>, like: Var| Tensor::new(val(like).shape().to_vec(), v);
                out.push((x, Tensor::new(xv.shape().to_vec(), gx)?));
                out.push((mean, reshape(gmu, mean)?));
                out.push((var, reshape(gvar, var)?));
                out.push((gamma, reshape(ggamma, gamma)?));
                out.push((beta, reshape(gbeta, beta)?));
            }
            &Op::ChannelMean(x) => {
                let xv = val(x);
                let inner = xv.numel() / xv.shape()[0].max(1);
                out.push((x, Tensor::from_fn(xv.shape().to_vec(), |k| g.data()[k / inner] / inner as f64)));
            }
            &Op::Resize { x, mode } => {
                let (_, h, w) = val(x).dims3()?;
                out.push((x, tensor::resize_backward(g, h, w, mode)?));
            }
            &Op::GlobalAvgPool(x) => {
                let xv = val(x);
                let inner = xv.numel() / xv.shape()[0].max(1);
                out.push((x, Tensor::from_fn(xv.shape().to_vec(), |k| g.data()[k / inner] / inner as f64)));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if want(p) {
                        out.push((p, tensor::slice(g, *axis, start, len)?));
                    }
                    start += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let mut gx = Tensor::zeros(val(x).shape().to_vec());
                tensor::slice_accumulate(&mut gx, g, axis, start);
                out.push((x, gx));
            }
            &Op::Reshape(x) => out.push((x, g.reshape(val(x).shape().to_vec())?)),
            &Op::SumAll(x) => out.push((x, Tensor::full(val(x).shape().to_vec(), g.item()))),
            &Op::SumRows(x) => {
                let (_, n) = val(x).dims2()?;
                out.push((x, Tensor::from_fn(val(x).shape().to_vec(), |k| g.data()[k / n])));
            }
            Op::GatherRows { x, rows } => {
                let (_, n) = val(*x).dims2()?;
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx.data_mut()[r * n + j] += g.data()[i * n + j];
                    }
                }
                out.push((*x, gx));
            }
            Op::Pick { x, at } => {
                let (_, n) = val(*x).dims2()?;
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                for (i, &(r, c)) in at.iter().enumerate() {
                    gx.data_mut()[r * n + c] += g.data()[i];
                }
                out.push((*x, gx));
            }
            Op::BceWithLogits { logits, target } => {
                let xv = val(*logits);
                let scale = g.item() / xv.numel().max(1) as f64;
                out.push((
                    *logits,
                    Tensor::from_fn(xv.shape().to_vec(), |k| {
                        (tensor::sigmoid_scalar(xv.data()[k]) - target.data()[k]) * scale
                    }),
                ));
            }
            &Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = val(x);
                let (m, n) = xv.dims2()?;
                let gam = val(gamma).data();
                let mut gx = vec![0.0; m * n];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let row = &xv.data()[r * n..(r + 1) * n];
                    let (mu, inv) = row_stats(row, eps);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..n {
                        let gk = g.data()[r * n + j];
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = gk * gam[j];
                        ggamma[j] += gk * xhat[j];
                        gbeta[j] += gk;
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    for j in 0..n {
                        gx[r * n + j] = inv / n as f64 * (n as f64 * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                out.push((x, Tensor::new(vec![m, n], gx)?));
                out.push((gamma, Tensor::new(vec![n], ggamma)?));
                out.push((beta, Tensor::new(vec![n], gbeta)?));
            }
        }
        Ok(out)
    }
}

/// Mean and inverse standard deviation of a row.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len().max(1) as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}
