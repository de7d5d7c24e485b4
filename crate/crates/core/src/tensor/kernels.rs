//! Dense kernels shared by graph ops.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe matrices that lie within the slices, which the
    // callers size from the same m/k/n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `[C, H, W]` sample into `[C*kh*kw, H'*W']`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            line[jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x: [N, C_in, H, W]`, `w: [C_out, C_in, kh, kw]`.
pub(crate) fn conv2d_forward(x: &[f64], n: usize, w: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let mut out = vec![0.0; n * c_out * p];
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        im2col(&x[s * in_stride..(s + 1) * in_stride], g, &mut cols);
        gemm(
            c_out,
            k,
            p,
            w,
            Layout::row_major(k),
            &cols,
            Layout::row_major(p),
            0.0,
            &mut out[s * c_out * p..(s + 1) * c_out * p],
        );
    }
    out
}

/// Returns `(dx, dw)` for a batched convolution.
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    c_out: usize,
    g: &ConvGeom,
    grad_out: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let mut dw = vec![0.0; c_out * k];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for s in 0..n {
        let go = &grad_out[s * c_out * p..(s + 1) * c_out * p];
        im2col(&x[s * in_stride..(s + 1) * in_stride], g, &mut cols);
        // dw += go * cols^T
        gemm(
            c_out,
            p,
            k,
            go,
            Layout::row_major(p),
            &cols,
            Layout::transposed(p),
            1.0,
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = w^T * go
            gemm(
                k,
                c_out,
                p,
                w,
                Layout::transposed(k),
                go,
                Layout::row_major(p),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, g, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    (dx, dw)
}
