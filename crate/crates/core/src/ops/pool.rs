//! Spatial pooling: 2x2 max pooling (the encoder's downsampler) and the
//! global poolings used by the attention gates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Argmax positions saved by the forward pass; backward routes each output
/// gradient to the first-encountered maximum in row-major scan order.
pub struct MaxPoolCtx {
    input_shape: Shape,
    argmax: Vec<usize>,
}

pub fn max_pool_2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCtx)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::dim(format!(
            "max_pool_2x2 needs even spatial dims, got h={} w={}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow)?);
    let mut argmax = vec![0usize; out.numel()];
    let mut o = 0;
    for i in 0..s.n {
        for j in 0..s.c {
            let plane = input.plane(i, j);
            let base = (i * s.c + j) * s.h * s.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * s.w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * s.w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = base + best_idx;
                    o += 1;
                }
            }
        }
    }
    Ok((
        out,
        MaxPoolCtx {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn max_pool_2x2_backward<T: Scalar>(ctx: &MaxPoolCtx, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad_input = Tensor::zeros(ctx.input_shape);
    for (&src, &g) in ctx.argmax.iter().zip(grad_out.data()) {
        grad_input.data_mut()[src] += g;
    }
    grad_input
}

/// Mean over the (h, w) plane: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::one() / T::from_f64_lossy((s.h * s.w) as f64);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1).expect("valid shape"));
    for i in 0..s.n {
        for j in 0..s.c {
            let mut acc = T::zero();
            for &v in input.plane(i, j) {
                acc += v;
            }
            out.data_mut()[i * s.c + j] = acc * inv;
        }
    }
    out
}

/// Backward of the mean: spread each (n, c) gradient uniformly over its
/// plane.
pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::from_f64_lossy((input_shape.h * input_shape.w) as f64);
    let mut grad_input = Tensor::zeros(input_shape);
    for i in 0..input_shape.n {
        for j in 0..input_shape.c {
            let g = grad_out.data()[i * input_shape.c + j] * inv;
            grad_input.plane_mut(i, j).fill(g);
        }
    }
    grad_input
}

/// Max over the (h, w) plane with argmax capture (first maximum wins).
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1).expect("valid shape"));
    let mut argmax = vec![0usize; s.n * s.c];
    for i in 0..s.n {
        for j in 0..s.c {
            let plane = input.plane(i, j);
            let base = (i * s.c + j) * s.h * s.w;
            let mut best = plane[0];
            let mut best_idx = 0;
            for (idx, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_idx = idx;
                }
            }
            out.data_mut()[i * s.c + j] = best;
            argmax[i * s.c + j] = base + best_idx;
        }
    }
    (out, argmax)
}

pub fn global_max_pool_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut grad_input = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        grad_input.data_mut()[src] += g;
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_max_of_1234_is_4() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let (y, _) = max_pool_2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn tie_routes_gradient_to_top_left() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 2, 2).unwrap(), 5.0);
        let (y, ctx) = max_pool_2x2(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = Tensor::<f64>::full(y.shape(), 2.0);
        let gx = max_pool_2x2_backward(&ctx, &g);
        assert_eq!(gx.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 3, 4).unwrap());
        assert!(max_pool_2x2(&x).is_err());
    }

    #[test]
    fn pool_preserves_batch_and_channels() {
        let x = Tensor::<f64>::ones(Shape::new(3, 5, 6, 8).unwrap());
        let (y, _) = max_pool_2x2(&x).unwrap();
        assert_eq!(y.shape().dims(), [3, 5, 3, 4]);
    }

    #[test]
    fn global_avg_of_1_to_4_is_2_5() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
    }

    #[test]
    fn global_avg_of_constant_plane_is_that_constant() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 4).unwrap(), 7.25);
        let y = global_avg_pool(&x);
        assert!(y.data().iter().all(|&v| v == 7.25));
    }

    #[test]
    fn global_max_finds_first_maximum() {
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 2, 2).unwrap(),
            vec![1.0, 9.0, 9.0, 0.0],
        )
        .unwrap();
        let (y, argmax) = global_max_pool(&x);
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(argmax, vec![1]);
    }
}
