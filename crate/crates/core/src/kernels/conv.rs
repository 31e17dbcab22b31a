//! 2D convolution via im2col plus a dense matrix product.
//!
//! Three primitives cover both convolution directions:
//!   * `conv2d_fwd`        y = W ⊛ x + b
//!   * `conv2d_bwd_input`  dx for a given dy (the adjoint of the forward map)
//!   * `conv2d_bwd_weight` dW for a given (x, dy)
//!
//! Transposed convolution is the adjoint of convolution with the same
//! weight, so its forward pass is `conv2d_bwd_input` and its backward
//! passes reuse `conv2d_fwd` / `conv2d_bwd_weight` with the roles of the
//! operands exchanged. The tape layer does that bookkeeping.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::kernels::matmul::{matmul, matmul_a_bt_acc, matmul_at_b};
use crate::scalar::Scalar;

/// Shape bundle for one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(
    op: &'static str,
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if k == 0 || stride == 0 || input + 2 * padding < k {
        return Err(TensorError::ConvGeometry {
            op,
            input,
            kernel: k,
            stride,
            padding,
        });
    }
    Ok((input + 2 * padding - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        n: usize,
        ci: usize,
        h: usize,
        w: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let oh = conv_out_extent(op, h, k, stride, padding)?;
        let ow = conv_out_extent(op, w, k, stride, padding)?;
        Ok(ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image (ci×h×w) into a (ci·k·k) × (oh·ow) matrix.
fn im2col<E: Scalar>(x: &[E], g: &ConvGeom, cols: &mut [E]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let col_w = g.col_cols();
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * col_w;
                for oy in 0..g.oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    let out = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        for v in out.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto an image.
fn col2im<E: Scalar>(cols: &[E], g: &ConvGeom, x: &mut [E]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let col_w = g.col_cols();
    for ci in 0..g.ci {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * col_w;
                for oy in 0..g.oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is co×ci×k×k, `bias` (if any) is co.
pub fn conv2d_fwd<E: Scalar>(x: &[E], weight: &[E], bias: Option<&[E]>, g: &ConvGeom) -> Vec<E> {
    debug_assert_eq!(x.len(), g.n * g.ci * g.h * g.w);
    debug_assert_eq!(weight.len(), g.co * g.col_rows());
    let out_plane = g.col_cols();
    let mut y = vec![E::zero(); g.n * g.co * out_plane];
    let mut cols = vec![E::zero(); g.col_rows() * out_plane];
    let in_plane = g.ci * g.h * g.w;
    for n in 0..g.n {
        im2col(&x[n * in_plane..(n + 1) * in_plane], g, &mut cols);
        let yn = matmul(weight, &cols, g.co, g.col_rows(), out_plane);
        let dst = &mut y[n * g.co * out_plane..(n + 1) * g.co * out_plane];
        dst.copy_from_slice(&yn);
        if let Some(b) = bias {
            for co in 0..g.co {
                let bv = b[co];
                for v in &mut dst[co * out_plane..(co + 1) * out_plane] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Gradient w.r.t. the convolution input: scatter Wᵀ·dy back through im2col.
pub fn conv2d_bwd_input<E: Scalar>(dy: &[E], weight: &[E], g: &ConvGeom) -> Vec<E> {
    let out_plane = g.col_cols();
    debug_assert_eq!(dy.len(), g.n * g.co * out_plane);
    let in_plane = g.ci * g.h * g.w;
    let mut dx = vec![E::zero(); g.n * in_plane];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.co * out_plane..(n + 1) * g.co * out_plane];
        let dcols = matmul_at_b(weight, dyn_, g.col_rows(), g.co, out_plane);
        col2im(&dcols, g, &mut dx[n * in_plane..(n + 1) * in_plane]);
    }
    dx
}

/// Gradient w.r.t. the convolution weight: dy·colsᵀ accumulated over the batch.
pub fn conv2d_bwd_weight<E: Scalar>(x: &[E], dy: &[E], g: &ConvGeom) -> Vec<E> {
    let out_plane = g.col_cols();
    let in_plane = g.ci * g.h * g.w;
    let mut dw = vec![E::zero(); g.co * g.col_rows()];
    let mut cols = vec![E::zero(); g.col_rows() * out_plane];
    for n in 0..g.n {
        im2col(&x[n * in_plane..(n + 1) * in_plane], g, &mut cols);
        let dyn_ = &dy[n * g.co * out_plane..(n + 1) * g.co * out_plane];
        matmul_a_bt_acc(&mut dw, dyn_, &cols, g.co, out_plane, g.col_rows());
    }
    dw
}

/// Gradient w.r.t. the bias: sum of dy over batch and spatial positions.
pub fn conv2d_bwd_bias<E: Scalar>(dy: &[E], g: &ConvGeom) -> Vec<E> {
    let out_plane = g.col_cols();
    let mut db = vec![E::zero(); g.co];
    for n in 0..g.n {
        for co in 0..g.co {
            let base = (n * g.co + co) * out_plane;
            let mut acc = E::zero();
            for &v in &dy[base..base + out_plane] {
                acc += v;
            }
            db[co] += acc;
        }
    }
    db
}
