//! Raw numeric kernels over flat row-major buffers. No shape checking here;
//! callers in `tape` validate before dispatching.

use super::Padding;

/// `c = a·b` (or `c += a·b` when `accumulate`), with either operand optionally
/// read transposed. `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // elements of the slices whose lengths were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> Option<Self> {
        match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return None;
                }
                Some(Self { h, w, kh, kw, out_h: h - kh + 1, out_w: w - kw + 1, pad_y: 0, pad_x: 0, padding })
            }
            Padding::Zero | Padding::Replicate => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return None;
                }
                Some(Self { h, w, kh, kw, out_h: h, out_w: w, pad_y: kh / 2, pad_x: kw / 2, padding })
            }
        }
    }

    /// Source pixel feeding output `(oy, ox)` through tap `(ky, kx)`, or
    /// `None` for a zero-padded tap.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy + ky) as isize - self.pad_y as isize;
        let ix = (ox + kx) as isize - self.pad_x as isize;
        let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
        match self.padding {
            Padding::Valid => Some((iy as usize, ix as usize)),
            Padding::Zero => inside.then_some((iy as usize, ix as usize)),
            Padding::Replicate => Some((
                iy.clamp(0, self.h as isize - 1) as usize,
                ix.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }
}

/// Unfold an `h×w×c` input into `(out_h·out_w) × (kh·kw·c)` patch rows.
pub(crate) fn im2col(input: &[f64], c: usize, g: &ConvGeometry) -> Vec<f64> {
    let row = g.kh * g.kw * c;
    let mut cols = vec![0.0; g.out_h * g.out_w * row];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = (oy * g.out_w + ox) * row;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = (iy * g.w + ix) * c;
                        let dst = base + (ky * g.kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the input grid.
pub(crate) fn col2im(cols: &[f64], c: usize, g: &ConvGeometry) -> Vec<f64> {
    let row = g.kh * g.kw * c;
    let mut out = vec![0.0; g.h * g.w * c];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = (oy * g.out_w + ox) * row;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let dst = (iy * g.w + ix) * c;
                        let src = base + (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel convolution: `kernel` is `kh×kw×c`.
pub(crate) fn depthwise_forward(input: &[f64], kernel: &[f64], c: usize, g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.out_h * g.out_w * c];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let dst = (oy * g.out_w + ox) * c;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = (iy * g.w + ix) * c;
                        let k = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += input[src + ch] * kernel[k + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn depthwise_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    c: usize,
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut d_in = want_input.then(|| vec![0.0; g.h * g.w * c]);
    let mut d_k = want_kernel.then(|| vec![0.0; g.kh * g.kw * c]);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let go = (oy * g.out_w + ox) * c;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = (iy * g.w + ix) * c;
                        let k = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            let gv = grad_out[go + ch];
                            if let Some(d) = d_in.as_mut() {
                                d[src + ch] += gv * kernel[k + ch];
                            }
                            if let Some(d) = d_k.as_mut() {
                                d[k + ch] += gv * input[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape and data of permuting `data` (of `shape`) by `axes`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += src_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
    (out_shape, out)
}

/// Cyclic shift over the two leading axes: `out[(i+dy) mod h, (j+dx) mod w] = in[i, j]`.
pub(crate) fn roll2d(data: &[f64], h: usize, w: usize, inner: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    for i in 0..h {
        let oi = (i + sy) % h;
        for j in 0..w {
            let oj = (j + sx) % w;
            let src = (i * w + j) * inner;
            let dst = (oi * w + oj) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Row-wise softmax over contiguous rows of length `n`. Entries equal to
/// `-inf` receive exactly zero probability.
pub(crate) fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}
