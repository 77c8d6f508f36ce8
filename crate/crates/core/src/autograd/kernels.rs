//! Raw buffer kernels shared by forward and backward rules.

use crate::tensor::Real;

/// `c (+)= a · b` with `a: m×k`, `b: k×n`, all row-major.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c (+)= aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// `c (+)= a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Geometry of a 2-D convolution over an `h×w×cin` channel-last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, cin: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            h,
            w,
            cin,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Input pixel under kernel tap (ky, kx) for output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds patches into a `(ho·wo) × (k·k·cin)` matrix, tap-major then channel.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.ho * g.wo * plen];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * plen..(oy * g.wo + ox + 1) * plen];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.k + kx) * g.cin;
                        let src = (y * g.w + x) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let plen = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * plen..(oy * g.wo + ox + 1) * plen];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let src = (ky * g.k + kx) * g.cin;
                        let dst = (y * g.w + x) * g.cin;
                        for (o, &v) in out[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution forward: `kernel` is `k×k×c`, stride 1.
pub(crate) fn depthwise_forward<T: Real>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.cin;
    let mut out = vec![T::zero(); g.ho * g.wo * c];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let o = &mut out[(oy * g.wo + ox) * c..(oy * g.wo + ox + 1) * c];
            o.copy_from_slice(bias);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let kk = &kernel[(ky * g.k + kx) * c..(ky * g.k + kx + 1) * c];
                        let src = &input[(y * g.w + x) * c..(y * g.w + x + 1) * c];
                        for ((ov, &iv), &kv) in o.iter_mut().zip(src).zip(kk) {
                            *ov += iv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Depthwise convolution backward; accumulates into whichever gradient
/// buffers are present.
pub(crate) fn depthwise_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dinput: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let c = g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = &dout[(oy * g.wo + ox) * c..(oy * g.wo + ox + 1) * c];
            if let Some(db) = dbias.as_deref_mut() {
                for (b, &v) in db.iter_mut().zip(go) {
                    *b += v;
                }
            }
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let tap = (ky * g.k + kx) * c;
                        let pix = (y * g.w + x) * c;
                        if let Some(dk) = dkernel.as_deref_mut() {
                            for ch in 0..c {
                                dk[tap + ch] += go[ch] * input[pix + ch];
                            }
                        }
                        if let Some(di) = dinput.as_deref_mut() {
                            for ch in 0..c {
                                di[pix + ch] += go[ch] * kernel[tap + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Operand dimensions of a diagonal selective scan.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Diagonal selective recurrence, returning outputs and every hidden state.
///
/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t`, `y_t = ⟨C_t, h_t⟩ + D x_t`,
/// with `A = -exp(a_log)` and `h_0 = 0`. States are laid out `len×channels×state`.
pub(crate) fn scan_forward<T: Real>(
    x: &[T],
    delta: &[T],
    a_log: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    dims: ScanDims,
) -> (Vec<T>, Vec<T>) {
    let ScanDims {
        len,
        channels: ch,
        state: n,
    } = dims;
    let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
    let mut y = vec![T::zero(); len * ch];
    let mut states = vec![T::zero(); len * ch * n];
    for t in 0..len {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for k in 0..ch {
            let xt = x[t * ch + k];
            let dt = delta[t * ch + k];
            let base = (t * ch + k) * n;
            let mut acc = T::zero();
            for s in 0..n {
                let prev = if t == 0 {
                    T::zero()
                } else {
                    states[base - ch * n + s]
                };
                let h = (dt * a[k * n + s]).exp() * prev + dt * bt[s] * xt;
                states[base + s] = h;
                acc += ct[s] * h;
            }
            y[t * ch + k] = acc + d[k] * xt;
        }
    }
    (y, states)
}

/// Gradients of [`scan_forward`] for each operand.
pub(crate) struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a_log: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Real>(
    x: &[T],
    delta: &[T],
    a_log: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    states: &[T],
    dy: &[T],
    dims: ScanDims,
) -> ScanGrads<T> {
    let ScanDims {
        len,
        channels: ch,
        state: n,
    } = dims;
    let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
    let mut g = ScanGrads {
        x: vec![T::zero(); len * ch],
        delta: vec![T::zero(); len * ch],
        a_log: vec![T::zero(); ch * n],
        b: vec![T::zero(); len * n],
        c: vec![T::zero(); len * n],
        d: vec![T::zero(); ch],
    };
    let mut da = vec![T::zero(); ch * n];
    // Running adjoint of h_t, carried backwards through decay factors.
    let mut carry = vec![T::zero(); ch * n];
    for t in (0..len).rev() {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for k in 0..ch {
            let xt = x[t * ch + k];
            let dt = delta[t * ch + k];
            let gy = dy[t * ch + k];
            let base = (t * ch + k) * n;
            g.d[k] += gy * xt;
            g.x[t * ch + k] += gy * d[k];
            let mut ddt = T::zero();
            let mut dxt = T::zero();
            for s in 0..n {
                let h = states[base + s];
                g.c[t * n + s] += gy * h;
                let gh = gy * ct[s] + carry[k * n + s];
                let ak = a[k * n + s];
                let decay = (dt * ak).exp();
                let prev = if t == 0 {
                    T::zero()
                } else {
                    states[base - ch * n + s]
                };
                let g_decay = gh * prev * decay;
                ddt += g_decay * ak + gh * bt[s] * xt;
                da[k * n + s] += g_decay * dt;
                g.b[t * n + s] += gh * dt * xt;
                dxt += gh * dt * bt[s];
                carry[k * n + s] = gh * decay;
            }
            g.delta[t * ch + k] += ddt;
            g.x[t * ch + k] += dxt;
        }
    }
    for (ga, (&dav, &av)) in g.a_log.iter_mut().zip(da.iter().zip(&a)) {
        *ga = dav * av;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        let mut expect = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    expect[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, expect);

        // aᵀ stored as 3×2
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let mut c2 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c2, 2, 3, 4);
        assert_eq!(c2, expect);

        // bᵀ stored as 4×3
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c3 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c3, 2, 3, 4);
        for (x, y) in c3.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_geometry_follows_floor_rule() {
        let g = ConvGeom::new(7, 5, 1, 3, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (4, 3));
        assert!(ConvGeom::new(1, 1, 1, 3, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(4, 5, 2, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).sin()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
