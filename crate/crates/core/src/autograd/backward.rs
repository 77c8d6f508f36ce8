//! Backward rules: each consumes the upstream gradient of one node and
//! accumulates contributions into its inputs' gradient buffers.

use super::kernels::{self, ScanDims};
use super::{Node, Op, Var};
use crate::error::Result;
use crate::tensor::{split_axis, Real};

/// Gradient buffer for `v`, allocated on first use; `None` if `v` does not
/// need a gradient.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, contrib: impl IntoIterator<Item = T>) {
    if let Some(g) = slot(nodes, grads, v) {
        for (acc, c) in g.iter_mut().zip(contrib) {
            *acc += c;
        }
    }
}

pub(super) fn propagate<T: Real>(nodes: &[Node<T>], id: usize, up: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, up.iter().copied());
            accumulate(nodes, grads, *b, up.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, up.iter().copied());
            accumulate(nodes, grads, *b, up.iter().map(|&g| -g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, up.iter().zip(bv).map(|(&g, &y)| g * y));
            accumulate(nodes, grads, *b, up.iter().zip(av).map(|(&g, &x)| g * x));
        }
        Op::Scale(a, f) => accumulate(nodes, grads, *a, up.iter().map(|&g| g * *f)),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, up.iter().copied()),
        Op::AddChannel(x, b) => {
            accumulate(nodes, grads, *x, up.iter().copied());
            if let Some(gb) = slot(nodes, grads, *b) {
                let c = gb.len();
                for (i, &g) in up.iter().enumerate() {
                    gb[i % c] += g;
                }
            }
        }
        Op::MulChannel(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let c = sv.len();
            accumulate(nodes, grads, *x, up.iter().enumerate().map(|(i, &g)| g * sv[i % c]));
            if let Some(gs) = slot(nodes, grads, *s) {
                for (i, &g) in up.iter().enumerate() {
                    gs[i % c] += g * xv[i];
                }
            }
        }
        Op::MulLeading(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let inner = xv.len() / sv.len().max(1);
            accumulate(nodes, grads, *x, up.iter().enumerate().map(|(i, &g)| g * sv[i / inner]));
            if let Some(gs) = slot(nodes, grads, *s) {
                for (i, &g) in up.iter().enumerate() {
                    gs[i / inner] += g * xv[i];
                }
            }
        }
        Op::Unary(x, f) => {
            let xv = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                up.iter().zip(xv).zip(out).map(|((&g, &xi), &yi)| g * f.derivative(xi, yi)),
            );
        }
        Op::ClampMin(x, floor) => {
            let xv = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                up.iter().zip(xv).map(|(&g, &xi)| if xi > *floor { g } else { T::zero() }),
            );
        }
        Op::SmoothL1(x, beta) => {
            let xv = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                up.iter().zip(xv).map(|(&g, &xi)| {
                    if xi.abs() < *beta {
                        g * xi / *beta
                    } else {
                        g * xi.signum()
                    }
                }),
            );
        }
        Op::Sum(x) => {
            let n = nodes[x.0].value.numel();
            accumulate(nodes, grads, *x, std::iter::repeat_n(up[0], n));
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            let g = up[0] / T::lit(n.max(1) as f64);
            accumulate(nodes, grads, *x, std::iter::repeat_n(g, n));
        }
        Op::SumAxis(x, axis) => {
            let shape = nodes[x.0].value.shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            gx[(o * len + a) * inner + i] += up[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let shape = nodes[x.0].value.shape();
            let (r, c) = (shape[0], shape[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += up[j * r + i];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ash, bsh) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (ash[0], ash[1], bsh[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::gemm_nt(up, bv, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::gemm_tn(av, up, gb, k, m, n);
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            geom,
            cout,
        } => {
            let rows = geom.ho * geom.wo;
            let plen = geom.patch_len();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for (i, &g) in up.iter().enumerate() {
                    gb[i % cout] += g;
                }
            }
            if nodes[kernel.0].requires_grad {
                let cols = kernels::im2col(val(*x), geom);
                let gk = slot(nodes, grads, *kernel).expect("kernel requires grad");
                kernels::gemm_tn(&cols, up, gk, plen, rows, *cout);
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![T::zero(); rows * plen];
                kernels::gemm_nt(up, val(*kernel), &mut dcols, rows, *cout, plen);
                let gx = slot(nodes, grads, *x).expect("input requires grad");
                kernels::col2im(&dcols, geom, gx);
            }
        }
        Op::Depthwise { x, kernel, bias, geom } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let mut gx = nodes[x.0].requires_grad.then(|| vec![T::zero(); xv.len()]);
            let mut gk = nodes[kernel.0].requires_grad.then(|| vec![T::zero(); kv.len()]);
            let mut gb = nodes[bias.0].requires_grad.then(|| vec![T::zero(); geom.cin]);
            kernels::depthwise_backward(xv, kv, up, geom, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
            if let Some(g) = gx {
                accumulate(nodes, grads, *x, g);
            }
            if let Some(g) = gk {
                accumulate(nodes, grads, *kernel, g);
            }
            if let Some(g) = gb {
                accumulate(nodes, grads, *bias, g);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let c = gv.len();
            let rows = xv.len() / c;
            let inv_c = T::lit(1.0 / c as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); xv.len()];
            for r in 0..rows {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..c {
                    let i = r * c + j;
                    let xhat = (xv[i] - mu) * rs;
                    dgamma[j] += up[i] * xhat;
                    dbeta[j] += up[i];
                    let dxhat = up[i] * gv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for j in 0..c {
                    let i = r * c + j;
                    let xhat = (xv[i] - mu) * rs;
                    let dxhat = up[i] * gv[j];
                    dx[i] = rs * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Softmax(x) => {
            let c = *node.value.shape().last().expect("non-scalar");
            let mut dx = vec![T::zero(); out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(c).zip(out.chunks(c)).zip(up.chunks(c)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LogSoftmax(x) => {
            let c = *node.value.shape().last().expect("non-scalar");
            let mut dx = vec![T::zero(); out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(c).zip(out.chunks(c)).zip(up.chunks(c)) {
                let total: T = gr.iter().copied().sum();
                for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = g - y.exp() * total;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Slice { x, axis, start } => {
            let shape = nodes[x.0].value.shape();
            let (outer, full, inner) = split_axis(shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for (d, &g) in gx[dst..dst + len * inner].iter_mut().zip(&up[src..src + len * inner]) {
                        *d += g;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for (d, &g) in gv[dst..dst + len * inner].iter_mut().zip(&up[src..src + len * inner]) {
                            *d += g;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::GatherRows { x, index } => {
            let cols = nodes[x.0].value.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, &row) in index.iter().enumerate() {
                    for j in 0..cols {
                        gx[row * cols + j] += up[i * cols + j];
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&i, &g) in index.iter().zip(up) {
                    gx[i] += g;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let c = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += up[t * c + j];
                    }
                }
            }
        }
        Op::BroadcastRows(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = gx.len();
                for (i, &g) in up.iter().enumerate() {
                    gx[i % c] += g;
                }
            }
        }
        Op::SelectiveScan {
            x,
            delta,
            a_log,
            b,
            c,
            d,
            states,
            dims,
        } => {
            let dims: ScanDims = *dims;
            let g = kernels::scan_backward(val(*x), val(*delta), val(*a_log), val(*b), val(*c), val(*d), states, up, dims);
            accumulate(nodes, grads, *x, g.x);
            accumulate(nodes, grads, *delta, g.delta);
            accumulate(nodes, grads, *a_log, g.a_log);
            accumulate(nodes, grads, *b, g.b);
            accumulate(nodes, grads, *c, g.c);
            accumulate(nodes, grads, *d, g.d);
        }
    }
    Ok(())
}
