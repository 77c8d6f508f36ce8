//! Forward rules. Each method evaluates eagerly and records one node.
//!
//! Broadcasting is limited to scalar constants, per-channel vectors over the
//! last axis, and per-row factors over the leading axes; everything else must
//! be reshaped explicitly.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, ScanDims};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Real, Tensor};

/// Elementwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Recip,
    Sigmoid,
    Silu,
    Softplus,
    Tanh,
}

impl Unary {
    pub(crate) fn eval<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => x.recip(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    pub(crate) fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Sqrt => (y + y).recip(),
            Unary::Square => x + x,
            Unary::Recip => -(y * y),
            Unary::Sigmoid => y * (one - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Tanh => one - y * y,
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b)))
    }

    /// Sum of several equally shaped values.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        rest.iter().try_fold(*first, |acc, &v| self.add(acc, v))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(out, Op::Scale(a, factor))
    }

    /// Adds a constant.
    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.record(out, Op::AddScalar(a))
    }

    fn per_channel(&self, op: &'static str, x: Var, v: Var) -> Result<(Tensor<T>, Tensor<T>, usize)> {
        let (xv, vv) = (self.value(x), self.value(v));
        let c = *xv.shape().last().unwrap_or(&1);
        if vv.rank() != 1 || vv.numel() != c || xv.rank() == 0 {
            return Err(Error::dim(op, format!("{:?} with channel vector {:?}", xv.shape(), vv.shape())));
        }
        Ok((xv, vv, c))
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_channel(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv, c) = self.per_channel("add_channel", x, bias)?;
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        Ok(self.record(Tensor::new(xv.shape().to_vec(), data)?, Op::AddChannel(x, bias)))
    }

    /// `x[..., c] * s[c]`.
    pub fn mul_channel(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv, c) = self.per_channel("mul_channel", x, s)?;
        let sd = sv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * sd[i % c]).collect();
        Ok(self.record(Tensor::new(xv.shape().to_vec(), data)?, Op::MulChannel(x, s)))
    }

    /// Scales each leading-axis row of `x` by the matching entry of `s`.
    /// `s` must cover the leading axes of `x` exactly (e.g. an `h×w` mask
    /// against an `h×w×c` map).
    pub fn mul_leading(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let lead = sv.shape();
        if lead.len() > xv.rank() || &xv.shape()[..lead.len()] != lead {
            return Err(Error::dim("mul_leading", format!("{:?} by {:?}", xv.shape(), lead)));
        }
        let inner = xv.numel() / sv.numel().max(1);
        let sd = sv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * sd[i / inner]).collect();
        Ok(self.record(Tensor::new(xv.shape().to_vec(), data)?, Op::MulLeading(x, s)))
    }

    pub fn unary(&self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.eval(v));
        self.record(out, Op::Unary(x, f))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        self.record(out, Op::ClampMin(x, floor))
    }

    /// Elementwise smooth-L1 (Huber with transition `beta`).
    pub fn smooth_l1(&self, x: Var, beta: T) -> Var {
        let half = T::lit(0.5);
        let out = self.value(x).map(|v| {
            let a = v.abs();
            if a < beta {
                half * v * v / beta
            } else {
                a - half * beta
            }
        });
        self.record(out, Op::SmoothL1(x, beta))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::lit(v.numel().max(1) as f64);
        self.record(Tensor::scalar(m), Op::Mean(x))
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + a) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.record(Tensor::new(shape, out)?, Op::SumAxis(x, axis)))
    }

    /// Averages out one axis.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::lit(1.0 / len.max(1) as f64)))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, Op::Reshape(x)))
    }

    /// Transpose of a matrix.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let &[r, c] = v.shape() else {
            return Err(Error::dim("transpose", format!("expected a matrix, got {:?}", v.shape())));
        };
        let d = v.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.record(Tensor::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    /// Matrix product `a (m×k) · b (k×n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(Error::dim("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.record(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Affine map over the last axis: `x[..., cin] · w[cin×cout] + b[cout]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x);
        let cin = *shape.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / cin.max(1);
        let flat = self.reshape(x, vec![rows, cin])?;
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.add_channel(y, b)?;
        }
        let cout = self.shape(weight)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-scalar") = cout;
        self.reshape(y, out_shape)
    }

    /// 2-D convolution of an `h×w×cin` map with a `k×k×cin×cout` kernel.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (&[h, w, cin], &[k, k2, kcin, cout]) = (xv.shape(), kv.shape()) else {
            return Err(Error::dim("conv2d", format!("input {:?}, kernel {:?}", xv.shape(), kv.shape())));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel must be odd and square, got {k}×{k2}")));
        }
        if kcin != cin {
            return Err(Error::dim("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if bv.shape() != [cout] {
            return Err(Error::dim("conv2d", format!("bias {:?} for {cout} outputs", bv.shape())));
        }
        let geom = ConvGeom::new(h, w, cin, k, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", format!("{h}×{w} too small for k={k}, pad={padding}, stride={stride}")))?;
        let cols = kernels::im2col(xv.data(), &geom);
        let mut out = Vec::with_capacity(geom.ho * geom.wo * cout);
        for _ in 0..geom.ho * geom.wo {
            out.extend_from_slice(bv.data());
        }
        kernels::gemm_nn(&cols, kv.data(), &mut out, geom.ho * geom.wo, geom.patch_len(), cout);
        let value = Tensor::new(vec![geom.ho, geom.wo, cout], out)?;
        Ok(self.record(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cout,
            },
        ))
    }

    /// Per-channel ("depthwise") stride-1 convolution with a `k×k×c` kernel.
    pub fn depthwise_conv2d(&self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (&[h, w, c], &[k, k2, kc]) = (xv.shape(), kv.shape()) else {
            return Err(Error::dim("depthwise_conv2d", format!("input {:?}, kernel {:?}", xv.shape(), kv.shape())));
        };
        if k != k2 || kc != c || bv.shape() != [c] {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("input {:?}, kernel {:?}, bias {:?}", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        let geom = ConvGeom::new(h, w, c, k, 1, padding)
            .ok_or_else(|| Error::dim("depthwise_conv2d", "input smaller than kernel"))?;
        let out = kernels::depthwise_forward(xv.data(), kv.data(), bv.data(), &geom);
        let value = Tensor::new(vec![geom.ho, geom.wo, c], out)?;
        Ok(self.record(value, Op::Depthwise { x, kernel, bias, geom }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *xv.shape().last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim("layer_norm", format!("{:?} with gamma {:?}", xv.shape(), gv.shape())));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let rows = xv.numel() / c;
        let inv_c = T::lit(1.0 / c as f64);
        let (d, g, b) = (xv.data(), gv.data(), bv.data());
        let mut out = vec![T::zero(); xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = (var + eps).sqrt().recip();
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    fn last_axis_rows(&self, op: &'static str, x: Var) -> Result<(Tensor<T>, usize)> {
        let v = self.value(x);
        let c = *v.shape().last().ok_or_else(|| Error::dim(op, "scalar input"))?;
        if c == 0 {
            return Err(Error::dim(op, "empty last axis"));
        }
        Ok((v, c))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (v, c) = self.last_axis_rows("softmax", x)?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e = *e / z;
            }
        }
        Ok(self.record(Tensor::new(v.shape().to_vec(), out)?, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let (v, c) = self.last_axis_rows("log_softmax", x)?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<T>().ln();
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        Ok(self.record(Tensor::new(v.shape().to_vec(), out)?, Op::LogSoftmax(x)))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::dim("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape())));
        }
        let (outer, full, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.record(Tensor::new(shape, out)?, Op::Slice { x, axis, start }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let first = values.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let mut s = v.shape().to_vec();
            let len = s[axis];
            s[axis] = 0;
            let mut expect = first.shape().to_vec();
            expect[axis] = 0;
            if s != expect {
                return Err(Error::dim("concat", format!("{:?} vs {:?}", v.shape(), first.shape())));
            }
            shape[axis] += len;
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.record(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Reorders the rows of a matrix: output row `i` is input row `index[i]`.
    pub fn gather_rows(&self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        let &[rows, cols] = v.shape() else {
            return Err(Error::dim("gather_rows", format!("expected a matrix, got {:?}", v.shape())));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {rows}")));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        Ok(self.record(Tensor::new(vec![index.len(), cols], out)?, Op::GatherRows { x, index }))
    }

    /// Picks flat elements: output `i` is `x.data[index[i]]`.
    pub fn gather(&self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::dim("gather", format!("element {bad} of {}", v.numel())));
        }
        let out = index.iter().map(|&i| v.data()[i]).collect();
        Ok(self.record(Tensor::new(vec![index.len()], out)?, Op::Gather { x, index }))
    }

    /// Row lookup into a `vocab×c` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table);
        let &[vocab, c] = v.shape() else {
            return Err(Error::dim("embedding", format!("table must be a matrix, got {:?}", v.shape())));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        Ok(self.record(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Embedding {
                table,
                ids: ids.into(),
            },
        ))
    }

    /// Repeats a `c`-vector to fill `shape`, whose last extent must be `c`.
    pub fn broadcast_rows(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let v = self.value(x);
        if v.rank() != 1 || shape.last() != Some(&v.numel()) {
            return Err(Error::dim("broadcast_rows", format!("{:?} to {:?}", v.shape(), shape)));
        }
        let reps: usize = shape[..shape.len() - 1].iter().product();
        let mut out = Vec::with_capacity(reps * v.numel());
        for _ in 0..reps {
            out.extend_from_slice(v.data());
        }
        Ok(self.record(Tensor::new(shape, out)?, Op::BroadcastRows(x)))
    }

    /// Diagonal selective scan over a `len×channels` sequence.
    ///
    /// `delta` (`len×channels`) must be strictly positive; `a_log` is
    /// `channels×state`, `b` and `c` are `len×state`, `d` is `channels`.
    pub fn selective_scan(&self, x: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (xv, dv, av, bv, cv, skip) = (
            self.value(x),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d),
        );
        let &[len, ch] = xv.shape() else {
            return Err(Error::dim("selective_scan", format!("x must be len×channels, got {:?}", xv.shape())));
        };
        let n = av.shape().get(1).copied().unwrap_or(0);
        let ok = len >= 1
            && dv.shape() == [len, ch]
            && av.shape() == [ch, n]
            && bv.shape() == [len, n]
            && cv.shape() == [len, n]
            && skip.shape() == [ch];
        if !ok {
            return Err(Error::dim(
                "selective_scan",
                format!(
                    "x {:?}, delta {:?}, a_log {:?}, b {:?}, c {:?}, d {:?}",
                    xv.shape(),
                    dv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape(),
                    skip.shape()
                ),
            ));
        }
        assert!(
            dv.data().iter().all(|&s| s > T::zero()),
            "selective scan step sizes must be strictly positive"
        );
        let dims = ScanDims {
            len,
            channels: ch,
            state: n,
        };
        let (y, states) = kernels::scan_forward(xv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data(), dims);
        Ok(self.record(
            Tensor::new(vec![len, ch], y)?,
            Op::SelectiveScan {
                x,
                delta,
                a_log,
                b,
                c,
                d,
                states,
                dims,
            },
        ))
    }
}
