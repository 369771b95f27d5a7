//! Finite-difference gradient checking.
//!
//! Analytic backward passes are verified against central differences of a
//! scalar loss, element by element, in high precision (`f64`). Points where
//! the two one-sided differences disagree are flagged as non-differentiable
//! kinks (relu at 0, max-pool ties) and excluded from the error maximum.

use crate::tensor::Tensor;

/// Per-input summary of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct InputReport {
    /// Largest relative error over the non-kink elements.
    pub max_rel_error: f64,
    /// Flat index of the element attaining `max_rel_error`.
    pub worst_index: usize,
    /// Number of elements excluded as non-differentiable points.
    pub kinks: usize,
    /// Total number of elements probed.
    pub checked: usize,
}

/// Outcome of [`finite_difference_check`]. Never an `Err`: failures are
/// flagged in the report.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn total_kinks(&self) -> usize {
        self.inputs.iter().map(|r| r.kinks).sum()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, r) in self.inputs.iter().enumerate() {
            writeln!(
                f,
                "input {i}: max rel error {:.3e} at element {} ({} kinks excluded of {}) -> {}",
                r.max_rel_error,
                r.worst_index,
                r.kinks,
                r.checked,
                if r.max_rel_error < self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        Ok(())
    }
}

// One-sided derivatives that disagree by more than this relative margin
// mark a kink.
const KINK_REL: f64 = 1e-3;
const KINK_ABS: f64 = 1e-7;
// Relative errors are measured against max(|numeric|, |analytic|, FLOOR);
// the floor keeps finite-difference noise on true-zero gradients (e.g. a
// conv bias feeding a batch norm) from registering as disagreement.
const REL_FLOOR: f64 = 1e-3;

/// Compares `analytic` gradients against central finite differences of the
/// scalar `loss` at `inputs`, perturbing one element at a time by `step`.
///
/// `loss` must be a pure function of the inputs. `analytic[k]` is the
/// caller-computed gradient of the loss with respect to `inputs[k]`.
pub fn finite_difference_check<F>(
    loss: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    assert_eq!(
        inputs.len(),
        analytic.len(),
        "one analytic gradient per input required"
    );
    let base_loss = loss(inputs);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());

    for k in 0..inputs.len() {
        assert_eq!(
            inputs[k].shape(),
            analytic[k].shape(),
            "analytic gradient {k} has wrong shape"
        );
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        let mut kinks = 0usize;
        let n = inputs[k].numel();
        for e in 0..n {
            let original = work[k].data()[e];
            work[k].data_mut()[e] = original + step;
            let plus = loss(&work);
            work[k].data_mut()[e] = original - step;
            let minus = loss(&work);
            work[k].data_mut()[e] = original;

            let fwd = (plus - base_loss) / step;
            let bwd = (base_loss - minus) / step;
            if (fwd - bwd).abs() > KINK_REL * (fwd.abs() + bwd.abs()) + KINK_ABS {
                kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let ana = analytic[k].data()[e];
            let denom = numeric.abs().max(ana.abs()).max(REL_FLOOR);
            let rel = (numeric - ana).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = e;
            }
        }
        reports.push(InputReport {
            max_rel_error: max_rel,
            worst_index: worst,
            kinks,
            checked: n,
        });
    }
    GradCheckReport {
        inputs: reports,
        tolerance,
    }
}

/// Dots a tensor with a fixed weighting, the standard way to reduce an op
/// output to a checkable scalar.
pub fn weighted_sum(t: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    t.data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

/// Checks a trainable layer: the loss is `<forward(params, x), r>` and
/// the probed inputs are `x` followed by every trainable parameter.
///
/// `fwd` is the pure forward; `fwd_back` runs forward-with-context plus
/// backward with `r` as the output gradient, accumulates parameter
/// gradients, and returns the input gradient.
pub fn check_with_params<FwdPure, FwdBack>(
    template: &crate::nn::Params<f64>,
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    fwd: FwdPure,
    fwd_back: FwdBack,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    FwdPure: Fn(&crate::nn::Params<f64>, &Tensor<f64>) -> Tensor<f64>,
    FwdBack: Fn(&crate::nn::Params<f64>, &Tensor<f64>, &Tensor<f64>, &mut crate::nn::Grads<f64>) -> Tensor<f64>,
{
    let ids = template.trainable_ids();
    let mut grads = crate::nn::Grads::zeros_like(template);
    let gx = fwd_back(template, x, r, &mut grads);

    let mut inputs = vec![x.clone()];
    let mut analytic = vec![gx];
    for &id in &ids {
        inputs.push(template.get(id).clone());
        analytic.push(grads.get(id).clone());
    }
    let loss = |xs: &[Tensor<f64>]| {
        let mut ps = template.clone();
        for (k, &id) in ids.iter().enumerate() {
            *ps.get_mut(id) = xs[k + 1].clone();
        }
        weighted_sum(&fwd(&ps, &xs[0]), r)
    };
    finite_difference_check(loss, &inputs, &analytic, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_op_error_is_step_limited() {
        // loss = <3x, r>: gradient is exactly 3r, finite differences are
        // exact up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(1, 2, 3, 3).unwrap();
        let x = Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut rng);
        let r = Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut rng);
        let grad = r.scale(3.0);
        let report = finite_difference_check(
            |xs| weighted_sum(&xs[0].scale(3.0), &r),
            &[x],
            &[grad],
            1e-5,
            1e-8,
        );
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn relu_away_from_zero_passes() {
        let shape = Shape::new(1, 1, 2, 2).unwrap();
        let x =
            Tensor::<f64>::from_vec(shape, vec![-0.8, -0.3, 0.4, 1.2]).unwrap();
        let r = Tensor::<f64>::from_vec(shape, vec![0.7, -0.4, 0.9, 0.2]).unwrap();
        let y = ops::relu(&x);
        let grad = ops::relu_backward(&x, &r);
        let _ = y;
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::relu(&xs[0]), &r),
            &[x],
            &[grad],
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "{report}");
        assert_eq!(report.total_kinks(), 0);
    }

    #[test]
    fn relu_at_zero_is_flagged_as_kink_and_excluded() {
        let shape = Shape::new(1, 1, 1, 3).unwrap();
        let x = Tensor::<f64>::from_vec(shape, vec![-0.5, 0.0, 0.5]).unwrap();
        let r = Tensor::<f64>::from_vec(shape, vec![1.0, 1.0, 1.0]).unwrap();
        let grad = ops::relu_backward(&x, &r);
        let report = finite_difference_check(
            |xs| weighted_sum(&ops::relu(&xs[0]), &r),
            &[x],
            &[grad],
            1e-5,
            1e-4,
        );
        assert_eq!(report.total_kinks(), 1);
        assert!(report.passed(), "{report}");
    }
}
