//! Bilinear x2 upsampling with half-pixel sampling centers (corner
//! alignment disabled) and its transpose as the backward pass.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Per-output-index source pair and interpolation weights along one axis.
fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(in_len - 1);
            let hi = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub fn bilinear_upsample_x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let ys = axis_table(s.h, oh);
    let xs = axis_table(s.w, ow);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow)?);
    for i in 0..s.n {
        for j in 0..s.c {
            let src = input.plane(i, j);
            let dst = out.plane_mut(i, j);
            for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                let row0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let row1 = &src[y1 * s.w..(y1 + 1) * s.w];
                let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                    let a = row0[x0].to_f64_lossy() * (wy0 * wx0)
                        + row0[x1].to_f64_lossy() * (wy0 * wx1)
                        + row1[x0].to_f64_lossy() * (wy1 * wx0)
                        + row1[x1].to_f64_lossy() * (wy1 * wx1);
                    out_row[ox] = T::from_f64_lossy(a);
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of the interpolation: scatter each output gradient onto its
/// four source pixels with the same weights.
pub fn bilinear_upsample_x2_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let s = input_shape;
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let ys = axis_table(s.h, oh);
    let xs = axis_table(s.w, ow);
    let mut grad_input = Tensor::zeros(s);
    for i in 0..s.n {
        for j in 0..s.c {
            let go = grad_out.plane(i, j);
            let gi = grad_input.plane_mut(i, j);
            for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                let go_row = &go[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                    let g = go_row[ox].to_f64_lossy();
                    gi[y0 * s.w + x0] += T::from_f64_lossy(g * wy0 * wx0);
                    gi[y0 * s.w + x1] += T::from_f64_lossy(g * wy0 * wx1);
                    gi[y1 * s.w + x0] += T::from_f64_lossy(g * wy1 * wx0);
                    gi[y1 * s.w + x1] += T::from_f64_lossy(g * wy1 * wx1);
                }
            }
        }
    }
    grad_input
}
