//! Grouped 2-D cross-correlation, forward and backward.
//!
//! One kernel covers the whole architecture: groups = 1 gives the dense
//! convolution, groups = c_in the depthwise convolution, and intermediate
//! counts the grouped pointwise convolution. Parallelism is over disjoint
//! output planes, so results are independent of the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Saved forward state consumed by [`conv2d_backward`].
pub struct Conv2dCtx<T> {
    input: Tensor<T>,
    weight: Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    groups: usize,
}

fn check_conv_args<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(usize, usize, usize)> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if stride < 1 {
        return Err(Error::config("conv2d stride must be >= 1"));
    }
    if groups < 1 {
        return Err(Error::config("conv2d groups must be >= 1"));
    }
    if ishape.c % groups != 0 {
        return Err(Error::config(format!(
            "conv2d input channels {} not divisible by groups {}",
            ishape.c, groups
        )));
    }
    if wshape.n % groups != 0 {
        return Err(Error::config(format!(
            "conv2d output channels {} not divisible by groups {}",
            wshape.n, groups
        )));
    }
    if wshape.c != ishape.c / groups {
        return Err(Error::dim(format!(
            "conv2d weight channel axis is {}, expected input.c/groups = {}/{} = {}",
            wshape.c,
            ishape.c,
            groups,
            ishape.c / groups
        )));
    }
    if wshape.h != wshape.w {
        return Err(Error::dim(format!(
            "conv2d kernel must be square, got {}x{}",
            wshape.h, wshape.w
        )));
    }
    let k = wshape.h;
    if ishape.h + 2 * padding < k || ishape.w + 2 * padding < k {
        return Err(Error::dim(format!(
            "conv2d kernel {k} larger than padded input ({} + 2*{padding}, {} + 2*{padding})",
            ishape.h, ishape.w
        )));
    }
    if let Some(b) = bias {
        let bs = b.shape();
        if bs.numel() != wshape.n {
            return Err(Error::dim(format!(
                "conv2d bias has {} elements, expected one per output channel ({})",
                bs.numel(),
                wshape.n
            )));
        }
    }
    let oh = (ishape.h + 2 * padding - k) / stride + 1;
    let ow = (ishape.w + 2 * padding - k) / stride + 1;
    Ok((k, oh, ow))
}

/// Grouped cross-correlation of `input` (n, c_in, h, w) with `weight`
/// (c_out, c_in/groups, k, k), plus per-output-channel `bias`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let (k, oh, ow) = check_conv_args(input, weight, bias, stride, padding, groups)?;
    let ishape = input.shape();
    let c_out = weight.shape().n;
    let cpg = ishape.c / groups;
    let ocg = c_out / groups;
    let out_shape = Shape::new(ishape.n, c_out, oh, ow)?;
    let mut out = Tensor::zeros(out_shape);

    let in_data = input.data();
    let w_data = weight.data();
    let (h, w) = (ishape.h, ishape.w);
    let ohw = oh * ow;
    let ihw = h * w;

    out.data_mut()
        .par_chunks_mut(ohw)
        .enumerate()
        .for_each(|(plane, out_plane)| {
            let i = plane / c_out;
            let oc = plane % c_out;
            let g = oc / ocg;
            if let Some(b) = bias {
                out_plane.fill(b.data()[oc]);
            }
            for ic_l in 0..cpg {
                let ic = g * cpg + ic_l;
                let in_plane = &in_data[(i * ishape.c + ic) * ihw..(i * ishape.c + ic + 1) * ihw];
                let w_base = (oc * cpg + ic_l) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w_data[w_base + ky * k + kx];
                        accumulate_rows(
                            out_plane, in_plane, wv, oh, ow, h, w, ky, kx, stride, padding,
                        );
                    }
                }
            }
        });
    Ok(out)
}

/// out[oy, ox] += wv * in[oy*stride + ky - padding, ox*stride + kx - padding]
/// over the in-bounds region.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_rows<T: Scalar>(
    out_plane: &mut [T],
    in_plane: &[T],
    wv: T,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            // ix = ox + kx - padding must land in [0, w)
            let ox_lo = padding.saturating_sub(kx);
            let ox_hi = (w + padding - kx).min(ow);
            if ox_lo >= ox_hi {
                continue;
            }
            let shift = kx as isize - padding as isize;
            let src = &in_row[(ox_lo as isize + shift) as usize..(ox_hi as isize + shift) as usize];
            for (o, &s) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                *o = *o + wv * s;
            }
        } else {
            for (ox, o) in out_row.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - padding as isize;
                if ix >= 0 && ix < w as isize {
                    *o = *o + wv * in_row[ix as usize];
                }
            }
        }
    }
}

/// Forward pass that also captures the context for [`conv2d_backward`].
pub fn conv2d_ctx<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Conv2dCtx<T>)> {
    let out = conv2d(input, weight, bias, stride, padding, groups)?;
    Ok((
        out,
        Conv2dCtx {
            input: input.clone(),
            weight: weight.clone(),
            has_bias: bias.is_some(),
            stride,
            padding,
            groups,
        },
    ))
}

/// Gradients of the convolution with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    ctx: Conv2dCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let Conv2dCtx {
        input,
        weight,
        has_bias,
        stride,
        padding,
        groups,
    } = ctx;
    conv2d_grads(
        &input, &weight, has_bias, stride, padding, groups, grad_out,
    )
}

/// Backward with explicitly supplied saved tensors; composite layers use
/// this form to avoid duplicating weights into contexts.
pub fn conv2d_grads<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    groups: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (k, oh, ow) = check_conv_args(input, weight, None, stride, padding, groups)?;
    let ishape = input.shape();
    let c_out = weight.shape().n;
    let expected = Shape::new(ishape.n, c_out, oh, ow)?;
    if grad_out.shape() != expected {
        return Err(Error::dim(format!(
            "conv2d grad_out shape {} does not match forward output {}",
            grad_out.shape(),
            expected
        )));
    }
    let cpg = ishape.c / groups;
    let ocg = c_out / groups;
    let (h, w) = (ishape.h, ishape.w);
    let ihw = h * w;
    let ohw = oh * ow;
    let go_data = grad_out.data();
    let in_data = input.data();
    let w_data = weight.data();

    // d/d bias: plain sums over each output channel's planes.
    let grad_bias = if has_bias {
        let mut gb = Tensor::zeros(Shape::new(1, c_out, 1, 1)?);
        gb.data_mut()
            .par_iter_mut()
            .enumerate()
            .for_each(|(oc, slot)| {
                let mut acc = T::zero();
                for i in 0..ishape.n {
                    for &g in &go_data[(i * c_out + oc) * ohw..(i * c_out + oc + 1) * ohw] {
                        acc += g;
                    }
                }
                *slot = acc;
            });
        Some(gb)
    } else {
        None
    };

    // d/d weight: one contiguous (cpg * k * k) block per output channel.
    let mut grad_weight = Tensor::zeros(weight.shape());
    grad_weight
        .data_mut()
        .par_chunks_mut(cpg * k * k)
        .enumerate()
        .for_each(|(oc, gw_block)| {
            let g = oc / ocg;
            for i in 0..ishape.n {
                let go_plane = &go_data[(i * c_out + oc) * ohw..(i * c_out + oc + 1) * ohw];
                for ic_l in 0..cpg {
                    let ic = g * cpg + ic_l;
                    let in_plane = &in_data[(i * ishape.c + ic) * ihw..(i * ishape.c + ic + 1) * ihw];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                                let go_row = &go_plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let ox_lo = padding.saturating_sub(kx);
                                    let ox_hi = (w + padding - kx).min(ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    let shift = kx as isize - padding as isize;
                                    let src = &in_row[(ox_lo as isize + shift) as usize
                                        ..(ox_hi as isize + shift) as usize];
                                    for (&gv, &iv) in go_row[ox_lo..ox_hi].iter().zip(src) {
                                        acc += gv * iv;
                                    }
                                } else {
                                    for (ox, &gv) in go_row.iter().enumerate() {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix >= 0 && ix < w as isize {
                                            acc += gv * in_row[ix as usize];
                                        }
                                    }
                                }
                            }
                            gw_block[(ic_l * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });

    // d/d input: scatter grad_out through the kernel into each input plane.
    let mut grad_input = Tensor::zeros(ishape);
    grad_input
        .data_mut()
        .par_chunks_mut(ihw)
        .enumerate()
        .for_each(|(plane, gi_plane)| {
            let i = plane / ishape.c;
            let ic = plane % ishape.c;
            let g = ic / cpg;
            let ic_l = ic % cpg;
            for oc_l in 0..ocg {
                let oc = g * ocg + oc_l;
                let go_plane = &go_data[(i * c_out + oc) * ohw..(i * c_out + oc + 1) * ohw];
                let w_base = (oc * cpg + ic_l) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w_data[w_base + ky * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let gi_row = &mut gi_plane[iy as usize * w..(iy as usize + 1) * w];
                            let go_row = &go_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (w + padding - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let shift = kx as isize - padding as isize;
                                let dst = &mut gi_row[(ox_lo as isize + shift) as usize
                                    ..(ox_hi as isize + shift) as usize];
                                for (d, &gv) in dst.iter_mut().zip(&go_row[ox_lo..ox_hi]) {
                                    *d = *d + wv * gv;
                                }
                            } else {
                                for (ox, &gv) in go_row.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        gi_row[ix as usize] = gi_row[ix as usize] + wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((grad_input, grad_weight, grad_bias))
}
