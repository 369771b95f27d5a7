//! Channel concatenation for the decoder's skip connections.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Channels of `a` followed by channels of `b`; batch and spatial dims must
/// agree.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::dim(format!(
            "concat_channels needs matching batch/spatial axes, got {sa} vs {sb}"
        )));
    }
    let mut out = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w)?);
    for i in 0..sa.n {
        for j in 0..sa.c {
            out.plane_mut(i, j).copy_from_slice(a.plane(i, j));
        }
        for j in 0..sb.c {
            out.plane_mut(i, sa.c + j).copy_from_slice(b.plane(i, j));
        }
    }
    Ok(out)
}

/// Backward of the concat: split the gradient back into the two operands.
pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    c_a: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = grad_out.shape();
    if c_a == 0 || c_a >= s.c {
        return Err(Error::dim(format!(
            "concat_channels backward: split at {c_a} outside 1..{}",
            s.c
        )));
    }
    let mut ga = Tensor::zeros(Shape::new(s.n, c_a, s.h, s.w)?);
    let mut gb = Tensor::zeros(Shape::new(s.n, s.c - c_a, s.h, s.w)?);
    for i in 0..s.n {
        for j in 0..c_a {
            ga.plane_mut(i, j).copy_from_slice(grad_out.plane(i, j));
        }
        for j in 0..(s.c - c_a) {
            gb.plane_mut(i, j).copy_from_slice(grad_out.plane(i, c_a + j));
        }
    }
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_preserves_values_in_order() {
        let a = Tensor::<f64>::full(Shape::new(1, 2, 2, 2).unwrap(), 1.0);
        let b = Tensor::<f64>::full(Shape::new(1, 3, 2, 2).unwrap(), 2.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape().c, 5);
        for j in 0..2 {
            assert!(y.plane(0, j).iter().all(|&v| v == 1.0));
        }
        for j in 2..5 {
            assert!(y.plane(0, j).iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn backward_split_returns_exact_slices() {
        let a = Tensor::<f64>::full(Shape::new(2, 2, 3, 3).unwrap(), 4.0);
        let b = Tensor::<f64>::full(Shape::new(2, 1, 3, 3).unwrap(), -3.0);
        let y = concat_channels(&a, &b).unwrap();
        let (ga, gb) = concat_channels_backward(&y, 2).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn mismatched_spatial_dims_rejected() {
        let a = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2).unwrap());
        let b = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3).unwrap());
        assert!(concat_channels(&a, &b).is_err());
    }
}
