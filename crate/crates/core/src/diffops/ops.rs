//! Forward evaluation and adjoints for the operator set used by the
//! networks, the trainer and the receptive-field optimizer.
//!
//! Convolution is im2col + GEMM; the adjoint shares the same column
//! machinery, which is what makes the inner-product adjointness tests
//! exact to rounding.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};

use super::kernel::{Kernel, Padding};
use crate::elem::Elem;
use crate::error::{Error, Result};

/// BT.601 full-range luma weights (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Unfold one image `(c, h, w)` into a `(c*k*k, h*w)` column matrix for a
/// stride-1 same-size convolution.
pub(crate) fn im2col<T: Elem>(x: ArrayView3<'_, T>, k: usize, pad: Padding) -> Array2<T> {
    let (c, h, w) = x.dim();
    let r = (k / 2) as isize;
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = h * w;
    for ci in 0..c {
        let xbase = ci * h * w;
        for dy in 0..k {
            let oy = dy as isize - r;
            for dx in 0..k {
                let ox = dx as isize - r;
                let row = ((ci * k + dy) * k + dx) * row_len;
                for y in 0..h {
                    let dst = row + y * w;
                    let sy = y as isize + oy;
                    match pad {
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = xbase + (sy as usize) * w;
                            let x0 = (-ox).max(0) as usize;
                            let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                            if x0 < x1 {
                                let so = (x0 as isize + ox) as usize;
                                cs[dst + x0..dst + x1]
                                    .copy_from_slice(&xs[src + so..src + so + (x1 - x0)]);
                            }
                        }
                        Padding::Circular => {
                            let src = xbase + sy.rem_euclid(h as isize) as usize * w;
                            for xx in 0..w {
                                let sx = (xx as isize + ox).rem_euclid(w as isize) as usize;
                                cs[dst + xx] = xs[src + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into an image.
pub(crate) fn col2im<T: Elem>(
    cols: ArrayView2<'_, T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: Padding,
) -> Array3<T> {
    let r = (k / 2) as isize;
    let mut x = Array3::<T>::zeros((c, h, w));
    let cs = cols.as_slice().expect("col2im input must be contiguous");
    let xs = x.as_slice_mut().unwrap();
    let row_len = h * w;
    for ci in 0..c {
        let xbase = ci * h * w;
        for dy in 0..k {
            let oy = dy as isize - r;
            for dx in 0..k {
                let ox = dx as isize - r;
                let row = ((ci * k + dy) * k + dx) * row_len;
                for y in 0..h {
                    let src = row + y * w;
                    let sy = y as isize + oy;
                    match pad {
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst = xbase + (sy as usize) * w;
                            let x0 = (-ox).max(0) as usize;
                            let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                            for xx in x0..x1 {
                                let so = (xx as isize + ox) as usize;
                                xs[dst + so] = xs[dst + so] + cs[src + xx];
                            }
                        }
                        Padding::Circular => {
                            let dst = xbase + sy.rem_euclid(h as isize) as usize * w;
                            for xx in 0..w {
                                let sx = (xx as isize + ox).rem_euclid(w as isize) as usize;
                                xs[dst + sx] = xs[dst + sx] + cs[src + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stride-1, same-size 2-D convolution with bias.
pub fn conv2d<T: Elem>(x: &Array4<T>, kern: &Kernel<T>) -> Result<Array4<T>> {
    conv2d_raw(x, &kern.weights, Some(kern.bias.view()), kern.padding)
}

/// Convolution without the bias term: the linear part of the operator,
/// which is what the spectral machinery measures.
pub fn conv2d_linear<T: Elem>(x: &Array4<T>, kern: &Kernel<T>) -> Result<Array4<T>> {
    conv2d_raw(x, &kern.weights, None, kern.padding)
}

pub(crate) fn conv2d_raw<T: Elem>(
    x: &Array4<T>,
    weights: &Array4<T>,
    bias: Option<ArrayView1<'_, T>>,
    pad: Padding,
) -> Result<Array4<T>> {
    let (b, c_in, h, w) = x.dim();
    let (c_out, kc_in, k, _) = weights.dim();
    if c_in != kc_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels, kernel expects {kc_in}"
        )));
    }
    let w2 = weights
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("kernel weights contiguous");
    let mut out = Array4::<T>::zeros((b, c_out, h, w));
    for bi in 0..b {
        let cols = im2col(x.index_axis(Axis(0), bi), k, pad);
        let mut o2 = w2.dot(&cols);
        if let Some(ref bias) = bias {
            for (mut row, &bv) in o2.rows_mut().into_iter().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        out.index_axis_mut(Axis(0), bi).assign(
            &o2.view_mut()
                .into_shape_with_order((c_out, h, w))
                .expect("reshape"),
        );
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d_linear`] for the same kernel and padding:
/// `<conv2d(x), y> == <x, conv2d_transpose(y)>`. Bias is ignored.
pub fn conv2d_transpose<T: Elem>(y: &Array4<T>, kern: &Kernel<T>) -> Result<Array4<T>> {
    conv2d_transpose_raw(y, &kern.weights, kern.padding)
}

pub(crate) fn conv2d_transpose_raw<T: Elem>(
    y: &Array4<T>,
    weights: &Array4<T>,
    pad: Padding,
) -> Result<Array4<T>> {
    let (b, c_out, h, w) = y.dim();
    let (kc_out, c_in, k, _) = weights.dim();
    if c_out != kc_out {
        return Err(Error::shape(format!(
            "conv2d_transpose: input has {c_out} channels, kernel produces {kc_out}"
        )));
    }
    let w2 = weights
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("kernel weights contiguous");
    let mut out = Array4::<T>::zeros((b, c_in, h, w));
    for bi in 0..b {
        let y2 = y
            .index_axis(Axis(0), bi)
            .into_shape_with_order((c_out, h * w))
            .expect("contiguous");
        let cols = w2.t().dot(&y2);
        let xi = col2im(cols.view(), c_in, h, w, k, pad);
        out.index_axis_mut(Axis(0), bi).assign(&xi);
    }
    Ok(out)
}

/// Gradient of a convolution with respect to its weights:
/// `d(sum(dy * conv2d(x)))/dW`, accumulated over the batch.
pub fn conv2d_grad_weights<T: Elem>(
    x: &Array4<T>,
    dy: &Array4<T>,
    k: usize,
    pad: Padding,
) -> Array4<T> {
    let (b, c_in, h, w) = x.dim();
    let c_out = dy.dim().1;
    let mut dw2 = Array2::<T>::zeros((c_out, c_in * k * k));
    for bi in 0..b {
        let cols = im2col(x.index_axis(Axis(0), bi), k, pad);
        let dy2 = dy
            .index_axis(Axis(0), bi)
            .into_shape_with_order((c_out, h * w))
            .expect("contiguous");
        dw2 = dw2 + dy2.dot(&cols.t());
    }
    dw2.into_shape_with_order((c_out, c_in, k, k))
        .expect("reshape")
}

/// Gradient of a convolution with respect to its bias: per-channel sum of
/// the upstream gradient.
pub fn conv2d_grad_bias<T: Elem>(dy: &Array4<T>) -> Array1<T> {
    let c_out = dy.dim().1;
    let mut db = Array1::<T>::zeros(c_out);
    for bi in 0..dy.dim().0 {
        for co in 0..c_out {
            db[co] = db[co] + dy.slice(s![bi, co, .., ..]).iter().copied().sum();
        }
    }
    db
}

/// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
pub fn relu<T: Elem>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Upstream gradient masked by the ReLU activation pattern.
pub fn relu_backward<T: Elem>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut g = dy.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    });
    g
}

/// Rearrange `(b, c*s^2, h, w)` into `(b, c, h*s, w*s)`.
///
/// Input channel `c_out*s^2 + dy*s + dx` lands at output offset `(dy, dx)`
/// inside each `s x s` block.
pub fn pixel_shuffle<T: Elem>(x: &Array4<T>, s: usize) -> Result<Array4<T>> {
    let (b, c, h, w) = x.dim();
    if s == 0 {
        return Err(Error::config("pixel_shuffle: scale must be >= 1"));
    }
    if c % (s * s) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c} channels not divisible by s^2 = {}",
            s * s
        )));
    }
    let co = c / (s * s);
    let mut out = Array4::<T>::zeros((b, co, h * s, w * s));
    for bi in 0..b {
        for oc in 0..co {
            for dy in 0..s {
                for dx in 0..s {
                    let ic = oc * s * s + dy * s + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[[bi, oc, y * s + dy, x_ * s + dx]] = x[[bi, ic, y, x_]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]: `(b, c, h*s, w*s)` back to `(b, c*s^2, h, w)`.
pub fn pixel_unshuffle<T: Elem>(x: &Array4<T>, s: usize) -> Result<Array4<T>> {
    let (b, c, hs, ws) = x.dim();
    if s == 0 {
        return Err(Error::config("pixel_unshuffle: scale must be >= 1"));
    }
    if hs % s != 0 || ws % s != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: spatial dims ({hs}, {ws}) not divisible by {s}"
        )));
    }
    let (h, w) = (hs / s, ws / s);
    let mut out = Array4::<T>::zeros((b, c * s * s, h, w));
    for bi in 0..b {
        for oc in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let ic = oc * s * s + dy * s + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[[bi, ic, y, x_]] = x[[bi, oc, y * s + dy, x_ * s + dx]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis; batch and spatial dims must agree.
pub fn concat_channels<T: Elem>(xs: &[&Array4<T>]) -> Result<Array4<T>> {
    if xs.is_empty() {
        return Err(Error::usage("concat_channels: empty input list"));
    }
    let (b, _, h, w) = xs[0].dim();
    for x in xs.iter().skip(1) {
        let (b2, _, h2, w2) = x.dim();
        if (b2, h2, w2) != (b, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: batch/spatial mismatch ({b},{h},{w}) vs ({b2},{h2},{w2})"
            )));
        }
    }
    let c_total: usize = xs.iter().map(|x| x.dim().1).sum();
    let mut out = Array4::<T>::zeros((b, c_total, h, w));
    let mut at = 0;
    for x in xs {
        let c = x.dim().1;
        out.slice_mut(s![.., at..at + c, .., ..]).assign(x);
        at += c;
    }
    Ok(out)
}

/// Copy out a channel range `[from, to)`.
pub fn slice_channels<T: Elem>(x: &Array4<T>, from: usize, to: usize) -> Array4<T> {
    x.slice(s![.., from..to, .., ..]).to_owned()
}

/// Tile the channel axis `n` times: `(b, c, h, w)` to `(b, c*n, h, w)`.
pub fn repeat_channels<T: Elem>(x: &Array4<T>, n: usize) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((b, c * n, h, w));
    for i in 0..n {
        out.slice_mut(s![.., i * c..(i + 1) * c, .., ..]).assign(x);
    }
    out
}

/// BT.601 full-range luma from an RGB tensor `(b, 3, h, w)`.
pub fn luma<T: Elem>(x: &Array4<T>) -> Result<Array4<T>> {
    let (b, c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::shape(format!("luma: expected 3 channels, got {c}")));
    }
    let wr = T::from_f64(LUMA_WEIGHTS[0]);
    let wg = T::from_f64(LUMA_WEIGHTS[1]);
    let wb = T::from_f64(LUMA_WEIGHTS[2]);
    let mut out = Array4::<T>::zeros((b, 1, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x_ in 0..w {
                out[[bi, 0, y, x_]] = wr * x[[bi, 0, y, x_]]
                    + wg * x[[bi, 1, y, x_]]
                    + wb * x[[bi, 2, y, x_]];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`luma`]: spread a 1-channel gradient onto RGB.
pub fn luma_adjoint<T: Elem>(g: &Array4<T>) -> Array4<T> {
    let (b, _, h, w) = g.dim();
    let mut out = Array4::<T>::zeros((b, 3, h, w));
    for (ch, wc) in LUMA_WEIGHTS.iter().enumerate() {
        let wc = T::from_f64(*wc);
        for bi in 0..b {
            for y in 0..h {
                for x_ in 0..w {
                    out[[bi, ch, y, x_]] = wc * g[[bi, 0, y, x_]];
                }
            }
        }
    }
    out
}

/// Mean of squared differences.
pub fn mse_loss<T: Elem>(pred: &Array4<T>, target: &Array4<T>) -> Result<T> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "mse_loss: shape mismatch {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = T::from_f64(pred.len() as f64);
    let sum: T = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Sum of all elements.
pub fn sum_all<T: Elem>(x: &Array4<T>) -> T {
    x.iter().copied().sum()
}

/// Frobenius inner product of two same-shaped tensors.
pub fn dot_all<T: Elem>(a: &Array4<T>, b: &Array4<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm over all elements.
pub fn l2_norm<T: Elem>(x: &Array4<T>) -> T {
    dot_all(x, x).sqrt()
}
