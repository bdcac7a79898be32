//! Forward kernels and the public operation surface of [`Tensor`].
//!
//! Recorded primitives carry hand-written backward rules (see `backward.rs`).
//! `mean`, `softmax`, `conv2d` (with bias), `maxpool2d` and `batchnorm2d` are
//! compositions of primitives, so their derivatives of every order follow.

use std::sync::Arc;

use super::array::strides;
use super::{Array, Tensor};
use crate::error::{Error, Result};

/// Stabilizer added to the batch variance in [`Tensor::batchnorm2d`].
pub const BN_EPS: f64 = 1e-5;

/// Gather index that reads as zero (used for padding).
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Shift,
    MatMul,
    Transpose,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Pow(f64),
    ClampMin(f64),
    Sum,
    Broadcast,
    SumAxis(usize),
    BroadcastAxis(usize),
    Reshape,
    Permute(Vec<usize>),
    Gather(Arc<[usize]>),
    ScatterAdd(Arc<[usize]>),
    Conv2d(isize, isize),
}

/// Identifies a recorded primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Shift,
    MatMul,
    Transpose,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Pow,
    ClampMin,
    Sum,
    Broadcast,
    SumAxis,
    BroadcastAxis,
    Reshape,
    Permute,
    Gather,
    ScatterAdd,
    Conv2d,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Shift => "shift",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Pow => "pow",
            OpKind::ClampMin => "clamp_min",
            OpKind::Sum => "sum",
            OpKind::Broadcast => "broadcast",
            OpKind::SumAxis => "sum_axis",
            OpKind::BroadcastAxis => "broadcast_axis",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Gather => "gather",
            OpKind::ScatterAdd => "scatter_add",
            OpKind::Conv2d => "conv2d",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 24] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Scale,
    OpKind::Shift,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Pow,
    OpKind::ClampMin,
    OpKind::Sum,
    OpKind::Broadcast,
    OpKind::SumAxis,
    OpKind::BroadcastAxis,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::Gather,
    OpKind::ScatterAdd,
    OpKind::Conv2d,
];

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::Shift => OpKind::Shift,
            Op::MatMul => OpKind::MatMul,
            Op::Transpose => OpKind::Transpose,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Pow(_) => OpKind::Pow,
            Op::ClampMin(_) => OpKind::ClampMin,
            Op::Sum => OpKind::Sum,
            Op::Broadcast => OpKind::Broadcast,
            Op::SumAxis(_) => OpKind::SumAxis,
            Op::BroadcastAxis(_) => OpKind::BroadcastAxis,
            Op::Reshape => OpKind::Reshape,
            Op::Permute(_) => OpKind::Permute,
            Op::Gather(_) => OpKind::Gather,
            Op::ScatterAdd(_) => OpKind::ScatterAdd,
            Op::Conv2d(..) => OpKind::Conv2d,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_kernel(a: &Array, b: &Array) -> Result<Array> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Array::from_parts(vec![m, n], out))
}

fn permute_kernel(x: &Array, perm: &[usize]) -> Array {
    let shape = x.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let data = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Array::from_parts(out_shape, out)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Stride-1 2-D convolution (cross-correlation) with zero padding `(rows, cols)`.
/// Negative padding crops instead of padding.
fn conv2d_kernel(x: &Array, w: &Array, (pad_h, pad_w): (isize, isize)) -> Result<Array> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::shape("conv2d", xs, ws));
    }
    let (n, c, h, wd) = (xs[0], xs[1], xs[2] as isize, xs[3] as isize);
    let (o, kh, kw) = (ws[0], ws[2] as isize, ws[3] as isize);
    let ho = h + 2 * pad_h - kh + 1;
    let wo = wd + 2 * pad_w - kw + 1;
    if ho < 1 || wo < 1 {
        return Err(Error::shape("conv2d", xs, ws));
    }
    let (ho_u, wo_u) = (ho as usize, wo as usize);
    let (xd, wdata) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * ho_u * wo_u];
    let (h_u, w_u) = (h as usize, wd as usize);
    for ni in 0..n {
        for oi in 0..o {
            let obase = (ni * o + oi) * ho_u * wo_u;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h_u * w_u;
                for a in 0..kh {
                    for b in 0..kw {
                        let wv = wdata[((oi * c + ci) * kh as usize + a as usize) * kw as usize + b as usize];
                        if wv == 0.0 {
                            continue;
                        }
                        // Output rows i with 0 <= i + a - pad_h < h.
                        let i0 = (pad_h - a).max(0);
                        let i1 = (h + pad_h - a).min(ho);
                        let j0 = (pad_w - b).max(0);
                        let j1 = (wd + pad_w - b).min(wo);
                        if i0 >= i1 || j0 >= j1 {
                            continue;
                        }
                        for i in i0..i1 {
                            let xr = (i + a - pad_h) as usize;
                            let orow = obase + i as usize * wo_u;
                            let xrow = xbase + xr * w_u;
                            let xoff = (j0 + b - pad_w) as usize;
                            let len = (j1 - j0) as usize;
                            let dst = &mut out[orow + j0 as usize..orow + j0 as usize + len];
                            let src = &xd[xrow + xoff..xrow + xoff + len];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Array::from_parts(vec![n, o, ho_u, wo_u], out))
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            if other.numel() == 1 && (self.numel() != 1 || self.rank() >= other.rank()) {
                return self.binary(&other.broadcast_to(self.shape())?, op, name, f);
            }
            if self.numel() == 1 {
                return self.broadcast_to(other.shape())?.binary(other, op, name, f);
            }
            return Err(Error::shape(name, self.shape(), other.shape()));
        }
        let value = self.value.zip_map(&other.value, f)?;
        Tensor::record(op, &[self, other], value)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let value = self.value.map(f);
        Tensor::record(op, &[self], value)
    }

    /// Element-wise sum; a single-element operand is broadcast.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::Scale(c), |x| x * c)
    }

    pub fn shift(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::Shift, |x| x + c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let value = matmul_kernel(&self.value, &other.value)?;
        Tensor::record(Op::MatMul, &[self, other], value)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", self.shape(), &[]));
        }
        let value = permute_kernel(&self.value, &[1, 0]);
        Tensor::record(Op::Transpose, &[self], value)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural logarithm; every element must be positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.value.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(Op::Log, f64::ln)
    }

    /// Element-wise power with a constant exponent. `pow(0.0)` is the constant one.
    pub fn pow(&self, p: f64) -> Result<Tensor> {
        if p == 0.0 {
            return Ok(Tensor::from(Array::ones(self.shape())));
        }
        let integral = p.fract() == 0.0;
        for &v in self.value.data() {
            if (v < 0.0 && !integral) || (v == 0.0 && p < 0.0) || v.is_nan() {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("{v} ^ {p} is not a finite real"),
                });
            }
        }
        self.unary(Op::Pow(p), |x| x.powf(p))
    }

    /// `max(x, c)` element-wise. The gradient is 0 where `x <= c`.
    pub fn clamp_min(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::ClampMin(c), |x| if x > c { x } else { c })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let value = Array::scalar(self.value.data().iter().sum());
        Tensor::record(Op::Sum, &[self], value)
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Usage("mean of empty tensor".into()));
        }
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Expands a single-element tensor to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::shape("broadcast", self.shape(), shape));
        }
        let value = Array::full(shape, self.value.data()[0]);
        Tensor::record(Op::Broadcast, &[self], value)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("sum_axis", self.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let data = self.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Tensor::record(Op::SumAxis(axis), &[self], Array::from_parts(shape, out))
    }

    /// Repeats an extent-1 `axis` `n` times.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis >= self.rank() || self.shape()[axis] != 1 {
            return Err(Error::shape("broadcast_axis", self.shape(), &[axis, n]));
        }
        let (outer, _, inner) = axis_split(self.shape(), axis);
        let data = self.value.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&data[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = n;
        Tensor::record(Op::BroadcastAxis(axis), &[self], Array::from_parts(shape, out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = self.value.reshape(shape)?;
        Tensor::record(Op::Reshape, &[self], value)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.rank()];
        if perm.len() != self.rank() || perm.iter().any(|&p| p >= seen.len()) {
            return Err(Error::shape("permute", self.shape(), perm));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::shape("permute", self.shape(), perm));
            }
        }
        let value = permute_kernel(&self.value, perm);
        Tensor::record(Op::Permute(perm.to_vec()), &[self], value)
    }

    /// `out[i] = self[index[i]]` over flattened storage; [`GATHER_ZERO`] reads 0.
    pub fn gather(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        let data = self.value.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < data.len() {
                out.push(data[i]);
            } else {
                return Err(Error::Usage(format!(
                    "gather index {i} out of range for {} elements",
                    data.len()
                )));
            }
        }
        Tensor::record(Op::Gather(index), &[self], Array::from_parts(shape.to_vec(), out))
    }

    /// Adjoint of [`gather`](Self::gather): `out[index[i]] += self[i]`.
    pub fn scatter_add(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != index.len() {
            return Err(Error::shape("scatter_add", self.shape(), &[index.len()]));
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(self.value.data()) {
            if i == GATHER_ZERO {
                continue;
            }
            if i >= n {
                return Err(Error::Usage(format!(
                    "scatter index {i} out of range for {n} elements"
                )));
            }
            out[i] += v;
        }
        Tensor::record(
            Op::ScatterAdd(index),
            &[self],
            Array::from_parts(shape.to_vec(), out),
        )
    }

    /// Stride-1 convolution of `[N,C,H,W]` by `[O,C,KH,KW]` with explicit
    /// `(rows, cols)` zero padding.
    pub fn conv2d_padded(&self, weight: &Tensor, pad: (isize, isize)) -> Result<Tensor> {
        let value = conv2d_kernel(&self.value, &weight.value, pad)?;
        Tensor::record(Op::Conv2d(pad.0, pad.1), &[self, weight], value)
    }

    /// Same-size 2-D convolution (stride 1, zero padding `k/2`) plus per-channel bias.
    ///
    /// `self` is `[N,C,H,W]`, `weight` is `[O,C,K,K]` with odd `K`, `bias` is `[O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) || bias.shape() != [ws[0]] {
            return Err(Error::shape("conv2d", ws, bias.shape()));
        }
        let pad = (ws[2] / 2) as isize;
        let out = self.conv2d_padded(weight, (pad, pad))?;
        let s = out.shape().to_vec();
        let b = bias
            .reshape(&[1, s[1], 1])?
            .broadcast_axis(0, s[0])?
            .broadcast_axis(2, s[2] * s[3])?
            .reshape(&s)?;
        out.add(&b)
    }

    /// Exchanges the first two axes of a conv kernel and mirrors it spatially.
    pub(crate) fn flip_kernel(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("flip_kernel", s, &[]));
        }
        let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
        let mut index = Vec::with_capacity(self.numel());
        for ci in 0..c {
            for oi in 0..o {
                for a in 0..kh {
                    for b in 0..kw {
                        index.push(((oi * c + ci) * kh + (kh - 1 - a)) * kw + (kw - 1 - b));
                    }
                }
            }
        }
        self.gather(index.into(), &[c, o, kh, kw])
    }

    /// 2×2 max pooling with stride 2 over `[N,C,H,W]` (odd trailing rows/columns dropped).
    pub fn maxpool2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("maxpool2d", s, &[2, 2]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let data = self.value.data();
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + di) * w + 2 * j + dj;
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(index.into(), &[n, c, ho, wo])
    }

    /// Per-channel batch normalization of `[N,C,H,W]` using the current batch's
    /// statistics (biased variance, stabilizer [`BN_EPS`]), then `scale * x + shift`.
    pub fn batchnorm2d(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let s = self.shape().to_vec();
        if s.len() != 4 || scale.shape() != [s[1]] || shift.shape() != [s[1]] {
            return Err(Error::shape("batchnorm2d", &s, scale.shape()));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let m = n * h * w;
        let inv_m = 1.0 / m as f64;
        let xt = self.permute(&[1, 0, 2, 3])?.reshape(&[c, m])?;
        let mean = xt.sum_axis(1)?.scale(inv_m)?;
        let centered = xt.sub(&mean.broadcast_axis(1, m)?)?;
        let var = centered.mul(&centered)?.sum_axis(1)?.scale(inv_m)?;
        let inv_std = var.shift(BN_EPS)?.pow(-0.5)?;
        let normed = centered.mul(&inv_std.broadcast_axis(1, m)?)?;
        let gamma = scale.reshape(&[c, 1])?.broadcast_axis(1, m)?;
        let beta = shift.reshape(&[c, 1])?.broadcast_axis(1, m)?;
        normed
            .mul(&gamma)?
            .add(&beta)?
            .reshape(&[c, n, h, w])?
            .permute(&[1, 0, 2, 3])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::shape("softmax", self.shape(), &[]));
        }
        let axis = self.rank() - 1;
        let len = self.shape()[axis];
        // Row maxima are treated as constants; softmax is invariant to them.
        let mut shifted = self.value.to_vec();
        for row in shifted.chunks_mut(len.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in row.iter_mut() {
                *v = m;
            }
        }
        let maxes = Tensor::from(Array::from_parts(self.shape().to_vec(), shifted));
        let e = self.sub(&maxes)?.exp()?;
        let total = e.sum_axis(axis)?.broadcast_axis(axis, len)?;
        e.div(&total)
    }

    /// Column `j` of a rank-2 tensor, as a vector.
    pub fn column(&self, j: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || j >= s[1] {
            return Err(Error::shape("column", s, &[j]));
        }
        let index: Vec<usize> = (0..s[0]).map(|i| i * s[1] + j).collect();
        self.gather(index.into(), &[s[0]])
    }
}
