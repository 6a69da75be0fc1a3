//! Numeric kernels shared by forward and backward rules.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `a_t` the slice `a` holds a row-major `k×m` matrix and is read
/// transposed; likewise `b_t` for a `n×k` `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted slice lengths cover every element addressed by the
    // strides above, and `c` does not alias `a` or `b` (distinct borrows).
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

/// Geometry of a valid-padding, stride-1 convolution over one sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn wo(&self) -> usize {
        self.w - self.kw + 1
    }
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn out_plane(&self) -> usize {
        self.ho() * self.wo()
    }
}

/// Unfolds one `[c_in, h, w]` sample into a `[c_in·kh·kw, ho·wo]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.ho(), g.wo());
    let plane = ho * wo;
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..ho {
                    let src = &x[(c * g.h + y + i) * g.w + j..][..wo];
                    dst[y * wo..(y + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `dx`.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.ho(), g.wo());
    let plane = ho * wo;
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..ho {
                    let dst = &mut dx[(c * g.h + y + i) * g.w + j..][..wo];
                    for (d, s) in dst.iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `x` is `[n, c_in, h, w]`, `weight` is
/// `[c_out, c_in, kh, kw]`; returns `[n, c_out, ho, wo]`.
pub(crate) fn conv2d_forward(x: &[f64], n: usize, weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let mut out = vec![0.0; n * out_len];
    let mut cols = vec![0.0; g.patch() * g.out_plane()];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        gemm(
            g.c_out,
            g.patch(),
            g.out_plane(),
            weight,
            false,
            &cols,
            false,
            &mut out[s * out_len..(s + 1) * out_len],
            0.0,
        );
    }
    out
}

/// Backward convolution: returns `(dx, dweight)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    g: &ConvGeom,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let mut dx = vec![0.0; n * in_len];
    let mut dw = vec![0.0; weight.len()];
    let mut cols = vec![0.0; g.patch() * g.out_plane()];
    let mut dcols = vec![0.0; g.patch() * g.out_plane()];
    for s in 0..n {
        let dout_s = &dout[s * out_len..(s + 1) * out_len];
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        // dW += dOut · colsᵀ
        gemm(
            g.c_out,
            g.out_plane(),
            g.patch(),
            dout_s,
            false,
            &cols,
            true,
            &mut dw,
            1.0,
        );
        // dcols = Wᵀ · dOut
        gemm(
            g.patch(),
            g.c_out,
            g.out_plane(),
            weight,
            true,
            dout_s,
            false,
            &mut dcols,
            0.0,
        );
        col2im_add(&dcols, g, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    (dx, dw)
}

/// 2×2, stride-2 max pooling over `[planes, h, w]`. Odd trailing rows and
/// columns are dropped. Returns the pooled values and, per output, the flat
/// input index that won (lowest index on ties).
pub(crate) fn maxpool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
