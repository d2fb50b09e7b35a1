//! im2col/col2im convolution kernels shared by the autodiff graph ops.
//!
//! Convolution and transposed convolution are both expressed as one GEMM per
//! sample plus an unfold (`im2col`) or fold (`col2im_acc`). The fold is the
//! exact adjoint of the unfold, which the tests verify directly; conv
//! backward-data and transposed-conv forward are the same fold, so the
//! gradient arithmetic is shared rather than duplicated.

use super::Scalar;
use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

/// Convolution output extent: `floor((input + 2*pad - k) / stride) + 1`.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Dimension(format!(
            "kernel {k} exceeds padded input {padded}"
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    Ok((padded - k) / stride + 1)
}

/// Transposed-convolution output extent: `(input - 1) * stride + k - 2*pad`.
pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    let grown = (input - 1) * stride + k;
    if grown <= 2 * pad {
        return Err(Error::Dimension(format!(
            "padding {pad} consumes entire transposed output {grown}"
        )));
    }
    Ok(grown - 2 * pad)
}

/// For one kernel tap `kx` and image extent `w`, the inclusive range of grid
/// columns whose source `ox*stride + kx - pad` lands inside `[0, w)`.
fn valid_grid_range(
    w: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    grid_w: usize,
) -> Option<(usize, usize)> {
    let lo_num = pad as isize - kx as isize;
    let lo = if lo_num > 0 {
        (lo_num as usize).div_ceil(stride)
    } else {
        0
    };
    let hi_num = w as isize - 1 - kx as isize + pad as isize;
    if hi_num < 0 {
        return None;
    }
    let hi = ((hi_num as usize) / stride).min(grid_w - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// Unfolds `x` of shape `(c, h, w)` into `(c*kh*kw, grid_h*grid_w)` with
/// zero padding: column `(oy, ox)` holds the receptive field of that output
/// position, row-indexed by `(channel, ky, kx)`.
pub fn im2col<T: Scalar>(
    x: ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((c * kh * kw, grid_h * grid_w));
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let cs = col.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let Some((ox_lo, ox_hi)) = valid_grid_range(w, kx, stride, pad, grid_w) else {
                    continue;
                };
                let len = ox_hi - ox_lo + 1;
                for oy in 0..grid_h {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (ox_lo * stride + kx) as isize - pad as isize;
                    let src_base = (ci * h + sy as usize) * w + sx0 as usize;
                    let dst_base = row * grid_h * grid_w + oy * grid_w + ox_lo;
                    if stride == 1 {
                        cs[dst_base..dst_base + len]
                            .copy_from_slice(&xs[src_base..src_base + len]);
                    } else {
                        for i in 0..len {
                            cs[dst_base + i] = xs[src_base + i * stride];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds `col` of shape `(c*kh*kw, grid_h*grid_w)`
/// back into an image of shape `(c, h, w)`, accumulating overlapping taps
/// into `out` (which must already be the right size).
pub fn col2im_acc<T: Scalar>(
    col: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
    out: &mut [T],
) {
    debug_assert_eq!(col.dim(), (c * kh * kw, grid_h * grid_w));
    debug_assert_eq!(out.len(), c * h * w);
    let cs = col.as_slice().expect("col buffer is contiguous");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let Some((ox_lo, ox_hi)) = valid_grid_range(w, kx, stride, pad, grid_w) else {
                    continue;
                };
                let len = ox_hi - ox_lo + 1;
                for oy in 0..grid_h {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (ox_lo * stride + kx) as isize - pad as isize;
                    let dst_base = (ci * h + sy as usize) * w + sx0 as usize;
                    let src_base = row * grid_h * grid_w + oy * grid_w + ox_lo;
                    for i in 0..len {
                        out[dst_base + i * stride] = out[dst_base + i * stride] + cs[src_base + i];
                    }
                }
            }
        }
    }
}

/// `x (n, c_in, h, w) * w (c_out, c_in, kh, kw) -> (n, c_out, gh, gw)`.
pub fn conv2d_forward<T: Scalar>(
    x: ArrayView4<'_, T>,
    weight: ArrayView4<'_, T>,
    bias: Option<ArrayView1<'_, T>>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (n, c_in, h, w) = x.dim();
    let (c_out, wc_in, kh, kw) = weight.dim();
    if c_in != wc_in {
        return Err(Error::Dimension(format!(
            "conv input has {c_in} channels but kernel expects {wc_in}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Dimension(format!(
                "bias length {} != {c_out} output channels",
                b.len()
            )));
        }
    }
    let gh = conv_out_size(h, kh, stride, pad)?;
    let gw = conv_out_size(w, kw, stride, pad)?;
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel is contiguous");
    let mut out = Array4::<T>::zeros((n, c_out, gh, gw));
    for i in 0..n {
        let col = im2col(x.index_axis(Axis(0), i), kh, kw, stride, pad, gh, gw);
        let mut out_mat = out
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((c_out, gh * gw))
            .expect("output slab is contiguous");
        general_mat_mul(T::one(), &w_mat, &col, T::zero(), &mut out_mat);
    }
    if let Some(b) = bias {
        for co in 0..c_out {
            let mut ch = out.slice_mut(ndarray::s![.., co, .., ..]);
            ch += b[co];
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to whichever operands are
/// requested; `dout` has the forward output's shape.
pub struct ConvGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dw: Option<Array4<T>>,
    pub db: Option<Array1<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: ArrayView4<'_, T>,
    weight: ArrayView4<'_, T>,
    dout: ArrayView4<'_, T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, c_in, h, w) = x.dim();
    let (c_out, _, kh, kw) = weight.dim();
    let (_, _, gh, gw) = dout.dim();
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel is contiguous");

    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c_in, h, w)));
    let mut dw_mat = need_dw.then(|| Array2::<T>::zeros((c_out, c_in * kh * kw)));
    let mut dcol = Array2::<T>::zeros((c_in * kh * kw, gh * gw));
    for i in 0..n {
        let dout_mat = dout
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_out, gh * gw))
            .expect("grad slab is contiguous");
        if let Some(dw_mat) = dw_mat.as_mut() {
            let col = im2col(x.index_axis(Axis(0), i), kh, kw, stride, pad, gh, gw);
            general_mat_mul(T::one(), &dout_mat, &col.t(), T::one(), dw_mat);
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(T::one(), &w_mat.t(), &dout_mat, T::zero(), &mut dcol);
            let mut slab = dx.index_axis_mut(Axis(0), i);
            col2im_acc(
                &dcol,
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                gh,
                gw,
                slab.as_slice_mut().expect("grad slab is contiguous"),
            );
        }
    }
    ConvGrads {
        dx,
        dw: dw_mat.map(|m| {
            m.into_shape_with_order((c_out, c_in, kh, kw))
                .expect("kernel shape round-trips")
        }),
        db: need_db.then(|| dout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))),
    }
}

/// `x (n, c_in, h, w) * w (c_in, c_out, kh, kw) -> (n, c_out, oh, ow)` with
/// `oh = (h-1)*stride + kh - 2*pad`: the adjoint map of a same-parameter
/// convolution, used for learned upsampling.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: ArrayView4<'_, T>,
    weight: ArrayView4<'_, T>,
    bias: Option<ArrayView1<'_, T>>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (n, c_in, h, w) = x.dim();
    let (wc_in, c_out, kh, kw) = weight.dim();
    if c_in != wc_in {
        return Err(Error::Dimension(format!(
            "transposed conv input has {c_in} channels but kernel expects {wc_in}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Dimension(format!(
                "bias length {} != {c_out} output channels",
                b.len()
            )));
        }
    }
    let oh = conv_transpose_out_size(h, kh, stride, pad)?;
    let ow = conv_transpose_out_size(w, kw, stride, pad)?;
    let w_mat = weight
        .to_shape((c_in, c_out * kh * kw))
        .expect("kernel is contiguous");
    let mut out = Array4::<T>::zeros((n, c_out, oh, ow));
    let mut col = Array2::<T>::zeros((c_out * kh * kw, h * w));
    for i in 0..n {
        let x_mat = x
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_in, h * w))
            .expect("input slab is contiguous");
        general_mat_mul(T::one(), &w_mat.t(), &x_mat, T::zero(), &mut col);
        let mut slab = out.index_axis_mut(Axis(0), i);
        col2im_acc(
            &col,
            c_out,
            oh,
            ow,
            kh,
            kw,
            stride,
            pad,
            h,
            w,
            slab.as_slice_mut().expect("output slab is contiguous"),
        );
    }
    if let Some(b) = bias {
        for co in 0..c_out {
            let mut ch = out.slice_mut(ndarray::s![.., co, .., ..]);
            ch += b[co];
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: ArrayView4<'_, T>,
    weight: ArrayView4<'_, T>,
    dout: ArrayView4<'_, T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, c_in, h, w) = x.dim();
    let (_, c_out, kh, kw) = weight.dim();
    let w_mat = weight
        .to_shape((c_in, c_out * kh * kw))
        .expect("kernel is contiguous");

    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c_in, h, w)));
    let mut dw_mat = need_dw.then(|| Array2::<T>::zeros((c_in, c_out * kh * kw)));
    for i in 0..n {
        // Gathering dout at every tap position is exactly im2col over the
        // output-side image, evaluated on the input-side grid.
        let dcol = im2col(dout.index_axis(Axis(0), i), kh, kw, stride, pad, h, w);
        if let Some(dx) = dx.as_mut() {
            let mut dx_mat = dx
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((c_in, h * w))
                .expect("grad slab is contiguous");
            general_mat_mul(T::one(), &w_mat, &dcol, T::zero(), &mut dx_mat);
        }
        if let Some(dw_mat) = dw_mat.as_mut() {
            let x_mat = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((c_in, h * w))
                .expect("input slab is contiguous");
            general_mat_mul(T::one(), &x_mat, &dcol.t(), T::one(), dw_mat);
        }
    }
    ConvGrads {
        dx,
        dw: dw_mat.map(|m| {
            m.into_shape_with_order((c_in, c_out, kh, kw))
                .expect("kernel shape round-trips")
        }),
        db: need_db.then(|| dout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))),
    }
}
