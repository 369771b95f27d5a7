//! Elementwise activations with their backward rules.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of relu given the forward *input*. The subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    grad_out
        .zip(input, |g, x| if x > T::zero() { g } else { T::zero() })
        .expect("relu backward shape mismatch")
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

#[inline(always)]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Backward of sigmoid given the forward *output* y: dy * y * (1 - y).
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    grad_out
        .zip(output, |g, y| g * y * (T::one() - y))
        .expect("sigmoid backward shape mismatch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![-1.0, 0.0, 2.0])
            .unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        assert_eq!(sigmoid(&x).data()[0], 0.5);
    }

    #[test]
    fn relu_backward_masks_gradient() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![-1.0, 0.5, 2.0])
            .unwrap();
        let g = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![10.0, 10.0, 10.0])
            .unwrap();
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 10.0, 10.0]);
    }
}
