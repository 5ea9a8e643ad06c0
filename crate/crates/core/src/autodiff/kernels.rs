//! Dense kernels shared by the tape operations.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted slice lengths.
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

/// Geometry of a stride-1 2-d convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad - self.kw + 1
    }

    /// Rows of the column matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the column matrix.
    pub fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unrolls `x[B, C, H, W]` into a `[C*kh*kw, B*Ho*Wo]` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    let mut cols = vec![0.0; g.patch() * ncols];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < g.pad || iy >= g.h + g.pad {
                            continue;
                        }
                        let iy = iy - g.pad;
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = ox + kx;
                            if ix < g.pad || ix >= g.w + g.pad {
                                continue;
                            }
                            dst_row[base + ox] = src[iy * g.w + ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into `dx[B, C, H, W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < g.pad || iy >= g.h + g.pad {
                            continue;
                        }
                        let iy = iy - g.pad;
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = ox + kx;
                            if ix < g.pad || ix >= g.w + g.pad {
                                continue;
                            }
                            dst[iy * g.w + ix - g.pad] += src_row[base + ox];
                        }
                    }
                }
            }
        }
    }
}
