//! Convolution kernels lowered to matrix products via im2col.

use crate::error::{Error, Result};

/// Spatial bookkeeping for one convolution, seen from the side of the
/// tensor that gets unfolded (the input of `conv2d`, the output of
/// `conv_transpose2d`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
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
    pub fn for_conv(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if kernel_h > padded_h || kernel_w > padded_w {
            return Err(Error::InvalidShape {
                op: "conv2d",
                reason: format!(
                    "kernel {kernel_h}x{kernel_w} larger than padded input {padded_h}x{padded_w}"
                ),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution producing `channels×H×W` from
    /// an `in_h×in_w` map.
    pub fn for_transpose(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let full_h = (in_h - 1) * stride + kernel_h;
        let full_w = (in_w - 1) * stride + kernel_w;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::InvalidShape {
                op: "conv_transpose2d",
                reason: format!("padding {padding} consumes the whole {full_h}x{full_w} output"),
            });
        }
        Ok(Self {
            channels,
            height: full_h - 2 * padding,
            width: full_w - 2 * padding,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: in_h,
            out_w: in_w,
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·kH·kW) × (oH·oW)` column matrix.
pub(crate) fn im2col(src: &[f64], g: &Geometry, cols: &mut [f64]) {
    debug_assert_eq!(src.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let n_cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_h {
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, slot) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *slot = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back, adding into `dst`.
pub(crate) fn col2im_add(cols: &[f64], g: &Geometry, dst: &mut [f64]) {
    debug_assert_eq!(dst.len(), g.image_len());
    let n_cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let src_row = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, v) in src_row.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = op(a)·op(b) + beta·c` for row-major operands, where `op` optionally
/// transposes. `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every strided access stays in
    // bounds for the given dimensions, and `c` does not alias `a` or `b`.
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
