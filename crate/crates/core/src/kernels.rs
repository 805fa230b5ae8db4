//! Numeric kernels behind the tape operators.
//!
//! Convolutions lower to matrix products through `im2col`/`col2im`; the
//! matrix products run on `matrixmultiply::sgemm`. All routines work on plain
//! slices in row-major layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `trans_a` the slice `a` holds the `k x m` matrix; likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
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

/// Spatial bookkeeping of a strided, zero-padded 2-d correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv", "stride must be at least 1"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::dim(
                "conv",
                format!("kernel {kernel_h}x{kernel_w} larger than padded {height}x{width}"),
            ));
        }
        Ok(Geometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (oh*ow)` patch matrix.
pub fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto an image.
pub fn col2im(cols: &[f32], g: &Geometry, x: &mut [f32]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch `x` (`n` images laid out by `g`) with an
/// `out_c x C x kh x kw` kernel.
pub fn conv2d_forward(x: &[f32], n: usize, g: &Geometry, kernel: &[f32], out_c: usize) -> Vec<f32> {
    let (kk, p) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; n * out_c * p];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kk * p }];
    for b in 0..n {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let patches: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(out_c, kk, p, kernel, false, patches, false, &mut out[b * out_c * p..(b + 1) * out_c * p], 0.0);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &Geometry,
    kernel: &[f32],
    out_c: usize,
    grad_out: &[f32],
    mut grad_x: Option<&mut [f32]>,
    mut grad_kernel: Option<&mut [f32]>,
) {
    let (kk, p) = (g.patch_len(), g.out_len());
    let mut cols = vec![0.0; kk * p];
    for b in 0..n {
        let go = &grad_out[b * out_c * p..(b + 1) * out_c * p];
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            if g.is_pointwise() {
                gemm(out_c, p, kk, go, false, xb, true, gk, 1.0);
            } else {
                im2col(xb, g, &mut cols);
                gemm(out_c, p, kk, go, false, &cols, true, gk, 1.0);
            }
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let gxb = &mut gx[b * g.in_len()..(b + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(kk, out_c, p, kernel, true, go, false, gxb, 1.0);
            } else {
                gemm(kk, out_c, p, kernel, true, go, false, &mut cols, 0.0);
                col2im(&cols, g, gxb);
            }
        }
    }
}

/// Transposed convolution: the adjoint of a correlation whose *input* is the
/// `Co x OH x OW` output described by `g`. `x` is `n x Ci x g.out_h x g.out_w`
/// and `kernel` is `Ci x Co x kh x kw`.
pub fn conv_transpose2d_forward(x: &[f32], n: usize, in_c: usize, g: &Geometry, kernel: &[f32]) -> Vec<f32> {
    let (kk, p) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; n * g.in_len()];
    let mut cols = vec![0.0; kk * p];
    for b in 0..n {
        let xb = &x[b * in_c * p..(b + 1) * in_c * p];
        gemm(kk, in_c, p, kernel, true, xb, false, &mut cols, 0.0);
        col2im(&cols, g, &mut out[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &[f32],
    n: usize,
    in_c: usize,
    g: &Geometry,
    kernel: &[f32],
    grad_out: &[f32],
    mut grad_x: Option<&mut [f32]>,
    mut grad_kernel: Option<&mut [f32]>,
) {
    let (kk, p) = (g.patch_len(), g.out_len());
    let mut cols = vec![0.0; kk * p];
    for b in 0..n {
        im2col(&grad_out[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        if let Some(gx) = grad_x.as_deref_mut() {
            gemm(in_c, kk, p, kernel, false, &cols, false, &mut gx[b * in_c * p..(b + 1) * in_c * p], 1.0);
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            let xb = &x[b * in_c * p..(b + 1) * in_c * p];
            gemm(in_c, p, kk, xb, false, &cols, true, gk, 1.0);
        }
    }
}
