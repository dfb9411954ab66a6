//! Dense row-major tensors and the forward kernels used by the network.
//!
//! Every kernel here is a pure function of its inputs. The differentiable
//! wrappers live in [`crate::autograd`]; these functions are also used
//! directly on the inference-only paths (post-processing, mask resizing).

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Debug check for NaN/Inf.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Dimensions of a `[C, H, W]` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected [C, H, W], got {:?}", self.shape)),
        }
    }

    /// Dimensions of a `[M, N]` tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(shape_err!("expected a matrix, got {:?}", self.shape)),
        }
    }
}

/// How the right operand of a binary op maps onto the left operand.
///
/// Only the patterns the network needs are supported: identical shapes,
/// a single scalar, a per-channel vector against `[C, ...]`, and a
/// per-column bias against `[M, N]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    Scalar,
    /// `b` is `[C]` or `[C, 1, .., 1]`, `a` is `[C, ...]`; `inner` elements per channel.
    Channel { inner: usize },
    /// `b` is `[N]` or `[1, N]`, `a` is `[M, N]`.
    Row { cols: usize },
}

impl Broadcast {
    pub fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let b_numel: usize = b.iter().product();
        if b_numel == 1 {
            return Ok(Broadcast::Scalar);
        }
        if a.len() == 2 && (b == [a[1]] || b == [1, a[1]]) {
            return Ok(Broadcast::Row { cols: a[1] });
        }
        if a.len() >= 2
            && !b.is_empty()
            && b[0] == a[0]
            && (b.len() == 1 || (b.len() == a.len() && b[1..].iter().all(|&d| d == 1)))
        {
            return Ok(Broadcast::Channel {
                inner: a[1..].iter().product(),
            });
        }
        Err(shape_err!("cannot broadcast {:?} onto {:?}", b, a))
    }

    #[inline]
    pub fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel { inner } => i / inner,
            Broadcast::Row { cols } => i % cols,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        }
    }
}

/// Elementwise `a op b` with `b` broadcast onto `a`.
pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bc = Broadcast::resolve(&a.shape, &b.shape)?;
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| op.apply(x, b.data[bc.index(i)]))
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {} out of range for {:?}", axis, shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x.data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x.data[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// General matrix product into `c` (`c = a·b` when `accumulate` is false,
/// `c += a·b` otherwise). Strides are in elements and allow transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose lengths cover the strided extents;
    // every caller below derives strides from checked tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m, k] · [k, n]`, with either operand optionally read transposed.
pub fn matmul_t(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = if trans_a { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if trans_b { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape,
            if trans_a { "ᵀ" } else { "" },
            b.shape,
            if trans_b { "ᵀ" } else { "" }
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, rsa, csa, &b.data, rsb, csb, &mut out, false);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Batched `[B, m, k] · [B, k, n]`.
pub fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = a.dims3()?;
    let (bb, k2, n) = b.dims3()?;
    if ba != bb || k != k2 {
        return Err(shape_err!("batched matmul {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; ba * m * n];
    for i in 0..ba {
        gemm(
            m,
            k,
            n,
            &a.data[i * m * k..],
            k,
            1,
            &b.data[i * k * n..],
            n,
            1,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Tensor::new(vec![ba, m, n], out)
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Geometry of a 2-D convolution over a `[Cin, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err!("conv2d input must be [C, H, W], got {:?}", input)),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(shape_err!("conv2d kernel must be [Cout, Cin, kh, kw], got {:?}", kernel)),
        };
        if kcin != cin {
            return Err(Error::Config(format!(
                "conv2d kernel expects {} input channels, input has {}",
                kcin, cin
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(shape_err!(
                "conv2d kernel {}x{} does not fit padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output `o` and kernel offset `k`, if inside the input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfolds the input into a `[Cin*kh*kw, H'*W']` column matrix.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.out_pixels();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(y) = g.src(oy, ki, g.h) else { continue };
                    let src_row = &input[(c * g.h + y) * g.w..];
                    for ox in 0..g.out_w {
                        if let Some(x) = g.src(ox, kj, g.w) {
                            dst[oy * g.out_w + ox] = src_row[x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds a column matrix back onto the input grid, summing overlaps.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out_pixels();
    let mut out = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(y) = g.src(oy, ki, g.h) else { continue };
                    let base = (c * g.h + y) * g.w;
                    for ox in 0..g.out_w {
                        if let Some(x) = g.src(ox, kj, g.w) {
                            out[base + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation (no kernel flip).
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    if let Some(b) = bias {
        if b.shape != [g.cout] {
            return Err(shape_err!("conv2d bias must be [{}], got {:?}", g.cout, b.shape));
        }
    }
    let n = g.out_pixels();
    let k = g.patch_len();
    let mut out = vec![0.0; g.cout * n];
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0 {
        gemm(g.cout, k, n, &kernel.data, k, 1, &input.data, n, 1, &mut out, false);
    } else {
        let cols = im2col(&input.data, &g);
        gemm(g.cout, k, n, &kernel.data, k, 1, &cols, n, 1, &mut out, false);
    }
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            let bv = b.data[o];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![g.cout, g.out_h, g.out_w], out)
}

/// Gradients of a convolution w.r.t. its input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    let n = g.out_pixels();
    let k = g.patch_len();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    let cols_owned;
    let cols: &[f64] = if pointwise {
        &input.data
    } else {
        cols_owned = im2col(&input.data, &g);
        &cols_owned
    };
    // dK = dY · colsᵀ
    let mut grad_k = vec![0.0; g.cout * k];
    gemm(g.cout, n, k, &grad_out.data, n, 1, cols, 1, n, &mut grad_k, false);
    // dcols = Kᵀ · dY
    let mut grad_cols = vec![0.0; k * n];
    gemm(k, g.cout, n, &kernel.data, 1, k, &grad_out.data, n, 1, &mut grad_cols, false);
    let grad_in = if pointwise { grad_cols } else { col2im(&grad_cols, &g) };
    let grad_b = grad_out.data.chunks(n).map(|c| c.iter().sum()).collect();
    Ok((
        Tensor::new(input.shape.clone(), grad_in)?,
        Tensor::new(kernel.shape.clone(), grad_k)?,
        Tensor::new(vec![g.cout], grad_b)?,
    ))
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel of `[C, ...]`.
pub fn normalize_affine(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let c = *x.shape.first().ok_or_else(|| shape_err!("normalize on a scalar"))?;
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.numel() != c {
            return Err(shape_err!("{} must hold {} channels, got {:?}", name, c, t.shape));
        }
    }
    let inner = x.numel() / c.max(1);
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        let scale = gamma.data[ch] / (var.data[ch] + eps).sqrt();
        let shift = beta.data[ch] - mean.data[ch] * scale;
        for i in ch * inner..(ch + 1) * inner {
            out[i] = x.data[i] * scale + shift;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Per-channel mean and (biased) variance of a `[C, ...]` tensor.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape[0];
    let inner = x.numel() / c.max(1);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s = &x.data[ch * inner..(ch + 1) * inner];
        let m = s.iter().sum::<f64>() / inner as f64;
        mean[ch] = m;
        var[ch] = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / inner as f64;
    }
    (mean, var)
}

/// Spatial interpolation scheme for resizing feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// One interpolation tap along an axis: (low index, high index, weight of high).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre source taps for resizing an axis from `src` to `dst`.
pub(crate) fn axis_taps(src: usize, dst: usize, mode: Interpolation) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| match mode {
            Interpolation::Bilinear => {
                let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (s.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                Tap {
                    lo,
                    hi,
                    frac: s - lo as f64,
                }
            }
            Interpolation::Nearest => {
                let lo = (((d as f64 + 0.5) * scale).floor() as usize).min(src - 1);
                Tap { lo, hi: lo, frac: 0.0 }
            }
        })
        .collect()
}

/// Resizes every channel of `[C, h, w]` to `[C, out_h, out_w]`.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: Interpolation) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("cannot resize {:?} to {}x{}", x.shape, out_h, out_w));
    }
    let ty = axis_taps(h, out_h, mode);
    let tx = axis_taps(w, out_w, mode);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, ty) in ty.iter().enumerate() {
            for (ox, tx) in tx.iter().enumerate() {
                let top = src[ty.lo * w + tx.lo] * (1.0 - tx.frac) + src[ty.lo * w + tx.hi] * tx.frac;
                let bot = src[ty.hi * w + tx.lo] * (1.0 - tx.frac) + src[ty.hi * w + tx.hi] * tx.frac;
                dst[oy * out_w + ox] = top * (1.0 - ty.frac) + bot * ty.frac;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`resize`]: scatters an output gradient back onto the input grid.
pub(crate) fn resize_backward(
    grad: &Tensor,
    h: usize,
    w: usize,
    mode: Interpolation,
) -> Result<Tensor> {
    let (c, out_h, out_w) = grad.dims3()?;
    let ty = axis_taps(h, out_h, mode);
    let tx = axis_taps(w, out_w, mode);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &grad.data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ty.iter().enumerate() {
            for (ox, tx) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let (wy0, wy1) = (1.0 - ty.frac, ty.frac);
                let (wx0, wx1) = (1.0 - tx.frac, tx.frac);
                dst[ty.lo * w + tx.lo] += v * wy0 * wx0;
                dst[ty.lo * w + tx.hi] += v * wy0 * wx1;
                dst[ty.hi * w + tx.lo] += v * wy1 * wx0;
                dst[ty.hi * w + tx.hi] += v * wy1 * wx1;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Upsampling entry point; requires the output to be at least as large as the input.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if out_h < h || out_w < w {
        return Err(Error::Precondition(format!(
            "upsample target {}x{} is smaller than input {}x{}",
            out_h, out_w, h, w
        )));
    }
    resize(x, out_h, out_w, Interpolation::Bilinear)
}

/// `[C, H, W]` → `[C, 1, 1]` channel means.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("global average pool over an empty map"));
    }
    let (mean, _) = channel_moments(x);
    debug_assert_eq!(mean.len(), c);
    Tensor::new(vec![c, 1, 1], mean)
}

/// Concatenates tensors along `axis`; all other dims must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
    let rank = first.ndim();
    for p in parts {
        if p.ndim() != rank
            || p.shape[..axis] != first.shape[..axis]
            || p.shape.get(axis + 1..) != first.shape.get(axis + 1..)
        {
            return Err(shape_err!(
                "concat along axis {}: {:?} vs {:?}",
                axis,
                first.shape,
                p.shape
            ));
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis)?;
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, data)
}

/// `len` entries of `axis` starting at `start`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(&x.shape, axis)?;
    if start + len > n {
        return Err(shape_err!(
            "slice {}..{} of axis {} (size {})",
            start,
            start + len,
            axis,
            n
        ));
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    Tensor::new(shape, data)
}

/// Adds `part` into the `start..start+len` window of `axis` of `acc` (adjoint of [`slice`]).
pub(crate) fn slice_accumulate(acc: &mut Tensor, part: &Tensor, axis: usize, start: usize) {
    let (outer, n, inner) = split_axis(&acc.shape, axis).expect("checked at forward");
    let len = part.shape[axis];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        let src = &part.data[o * len * inner..(o + 1) * len * inner];
        for (d, s) in acc.data[base..base + len * inner].iter_mut().zip(src) {
            *d += s;
        }
    }
}
