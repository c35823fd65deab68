// Raw loops over flat row-major buffers. Shapes are validated by the caller.

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub top: usize,
    pub left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Output rows `oh` whose source row `oh + k - top` lies inside the input.
    #[inline]
    fn rows(&self, k: usize) -> (usize, usize) {
        valid_range(k, self.top, self.h, self.h_out)
    }

    #[inline]
    fn cols(&self, k: usize) -> (usize, usize) {
        valid_range(k, self.left, self.w, self.w_out)
    }
}

#[inline]
fn valid_range(k: usize, pad: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out_extent);
    let hi = (extent + pad).saturating_sub(k).min(out_extent);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward<T: Real>(
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let in_plane = d.h * d.w;
    let out_plane = d.h_out * d.w_out;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let o = &mut out[(n * d.c_out + co) * out_plane..][..out_plane];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..d.c_in {
                let x = &input[(n * d.c_in + ci) * in_plane..][..in_plane];
                let kbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    let (r0, r1) = d.rows(ky);
                    for kx in 0..d.kw {
                        let k = kernel[kbase + ky * d.kw + kx];
                        if k == T::zero() {
                            continue;
                        }
                        let (c0, c1) = d.cols(kx);
                        if c0 == c1 {
                            continue;
                        }
                        for oh in r0..r1 {
                            let ih = oh + ky - d.top;
                            let orow = &mut o[oh * d.w_out + c0..oh * d.w_out + c1];
                            let xrow = &x[ih * d.w + c0 + kx - d.left..][..c1 - c0];
                            for (ov, &xv) in orow.iter_mut().zip(xrow) {
                                *ov = *ov + k * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for input, kernel and bias (any may be skipped).
pub(crate) fn conv2d_backward<T: Real>(
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let in_plane = d.h * d.w;
    let out_plane = d.h_out * d.w_out;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = &grad_out[(n * d.c_out + co) * out_plane..][..out_plane];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[co] = gb[co] + g.iter().copied().sum::<T>();
            }
            for ci in 0..d.c_in {
                let xoff = (n * d.c_in + ci) * in_plane;
                let kbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    let (r0, r1) = d.rows(ky);
                    for kx in 0..d.kw {
                        let (c0, c1) = d.cols(kx);
                        if c0 == c1 {
                            continue;
                        }
                        let k = kernel[kbase + ky * d.kw + kx];
                        let mut acc = T::zero();
                        for oh in r0..r1 {
                            let ih = oh + ky - d.top;
                            let grow = &g[oh * d.w_out + c0..oh * d.w_out + c1];
                            let start = xoff + ih * d.w + c0 + kx - d.left;
                            if grad_kernel.is_some() {
                                let xrow = &input[start..start + (c1 - c0)];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc = acc + gv * xv;
                                }
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                if k != T::zero() {
                                    let irow = &mut gi[start..start + (c1 - c0)];
                                    for (iv, &gv) in irow.iter_mut().zip(grow) {
                                        *iv = *iv + k * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            let idx = kbase + ky * d.kw + kx;
                            gk[idx] = gk[idx] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// out[n, co, p] = bias[co] + sum_ci weight[co, ci] * input[n, ci, p]
pub(crate) fn linear_forward<T: Real>(
    n: usize,
    c_in: usize,
    c_out: usize,
    plane: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    for b in 0..n {
        for co in 0..c_out {
            let o = &mut out[(b * c_out + co) * plane..][..plane];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..c_in {
                let wv = weight[co * c_in + ci];
                let x = &input[(b * c_in + ci) * plane..][..plane];
                for (ov, &xv) in o.iter_mut().zip(x) {
                    *ov = *ov + wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    n: usize,
    c_in: usize,
    c_out: usize,
    plane: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    for b in 0..n {
        for co in 0..c_out {
            let g = &grad_out[(b * c_out + co) * plane..][..plane];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[co] = gb[co] + g.iter().copied().sum::<T>();
            }
            for ci in 0..c_in {
                let off = (b * c_in + ci) * plane;
                if let Some(gw) = grad_weight.as_deref_mut() {
                    let x = &input[off..off + plane];
                    let dot: T = g.iter().zip(x).map(|(&gv, &xv)| gv * xv).sum();
                    gw[co * c_in + ci] = gw[co * c_in + ci] + dot;
                }
                if let Some(gi) = grad_in.as_deref_mut() {
                    let wv = weight[co * c_in + ci];
                    for (iv, &gv) in gi[off..off + plane].iter_mut().zip(g) {
                        *iv = *iv + wv * gv;
                    }
                }
            }
        }
    }
}

/// Logical dimensions of a batched product `op(A)[M,K] x op(B)[K,P]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub trans_a: bool,
    pub trans_b: bool,
}

impl MatmulDims {
    #[inline]
    fn a_idx(&self, i: usize, j: usize) -> usize {
        if self.trans_a {
            j * self.m + i
        } else {
            i * self.k + j
        }
    }

    #[inline]
    fn b_idx(&self, i: usize, j: usize) -> usize {
        if self.trans_b {
            j * self.k + i
        } else {
            i * self.p + j
        }
    }
}

pub(crate) fn matmul_forward<T: Real>(d: &MatmulDims, a: &[T], b: &[T], out: &mut [T]) {
    let (sa, sb, so) = (d.m * d.k, d.k * d.p, d.m * d.p);
    for n in 0..d.batch {
        let (a, b) = (&a[n * sa..][..sa], &b[n * sb..][..sb]);
        let o = &mut out[n * so..][..so];
        for i in 0..d.m {
            for j in 0..d.p {
                let mut acc = T::zero();
                for l in 0..d.k {
                    acc = acc + a[d.a_idx(i, l)] * b[d.b_idx(l, j)];
                }
                o[i * d.p + j] = acc;
            }
        }
    }
}

pub(crate) fn matmul_backward<T: Real>(
    d: &MatmulDims,
    a: &[T],
    b: &[T],
    grad_out: &[T],
    mut grad_a: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    let (sa, sb, so) = (d.m * d.k, d.k * d.p, d.m * d.p);
    for n in 0..d.batch {
        let (av, bv) = (&a[n * sa..][..sa], &b[n * sb..][..sb]);
        let g = &grad_out[n * so..][..so];
        if let Some(ga) = grad_a.as_deref_mut() {
            let ga = &mut ga[n * sa..][..sa];
            for i in 0..d.m {
                for l in 0..d.k {
                    let mut acc = T::zero();
                    for j in 0..d.p {
                        acc = acc + g[i * d.p + j] * bv[d.b_idx(l, j)];
                    }
                    let idx = d.a_idx(i, l);
                    ga[idx] = ga[idx] + acc;
                }
            }
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            let gb = &mut gb[n * sb..][..sb];
            for l in 0..d.k {
                for j in 0..d.p {
                    let mut acc = T::zero();
                    for i in 0..d.m {
                        acc = acc + av[d.a_idx(i, l)] * g[i * d.p + j];
                    }
                    let idx = d.b_idx(l, j);
                    gb[idx] = gb[idx] + acc;
                }
            }
        }
    }
}
