//! Batch normalization (with running statistics) and per-channel group
//! normalization for the spatial attention branch.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Forward mode for stateful layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance per channel. Fresh stats are (0, 1), which makes
/// eval mode before any training step a valid pass-through.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Saved state for [`batch_norm_backward`].
pub struct BnCtx<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    train: bool,
}

fn check_affine<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = input.shape().c;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim(format!(
            "affine parameters must have one element per channel ({c}), got gamma {} / beta {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(())
}

/// Batch normalization over (n, h, w) per channel.
///
/// Train mode normalizes with batch statistics and updates `stats` by
/// exponential moving average (the variance stored is the unbiased one);
/// eval mode normalizes with the running statistics and leaves them
/// untouched.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats<T>,
    mode: Mode,
    momentum: T,
    epsilon: T,
) -> Result<(Tensor<T>, BnCtx<T>)> {
    check_affine(input, gamma, beta)?;
    if epsilon <= T::zero() {
        return Err(Error::config("batch_norm epsilon must be > 0"));
    }
    let s = input.shape();
    if stats.mean.len() != s.c {
        return Err(Error::dim(format!(
            "running stats track {} channels, input has {}",
            stats.mean.len(),
            s.c
        )));
    }
    let m = s.n * s.h * s.w;
    let mut out = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.c];
    let m_t = T::from_f64_lossy(m as f64);

    for j in 0..s.c {
        let (mu, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::config(
                        "batch_norm train mode needs at least 2 values per channel",
                    ));
                }
                let mut acc = T::zero();
                for i in 0..s.n {
                    for &v in input.plane(i, j) {
                        acc += v;
                    }
                }
                let mu = acc / m_t;
                let mut sq = T::zero();
                for i in 0..s.n {
                    for &v in input.plane(i, j) {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                let var = sq / m_t;
                let unbiased = sq / T::from_f64_lossy((m - 1) as f64);
                stats.mean[j] = (T::one() - momentum) * stats.mean[j] + momentum * mu;
                stats.var[j] = (T::one() - momentum) * stats.var[j] + momentum * unbiased;
                (mu, var)
            }
            Mode::Eval => (stats.mean[j], stats.var[j]),
        };
        let istd = T::one() / (var + epsilon).sqrt();
        inv_std[j] = istd;
        let g = gamma.data()[j];
        let b = beta.data()[j];
        for i in 0..s.n {
            let hw = s.h * s.w;
            let base = (i * s.c + j) * hw;
            for k in 0..hw {
                let xh = (input.data()[base + k] - mu) * istd;
                xhat.data_mut()[base + k] = xh;
                out.data_mut()[base + k] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BnCtx {
            xhat,
            inv_std,
            gamma: gamma.data().to_vec(),
            train: mode == Mode::Train,
        },
    ))
}

/// Gradients of batch_norm w.r.t. input, gamma and beta.
pub fn batch_norm_backward<T: Scalar>(
    ctx: &BnCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = ctx.xhat.shape();
    if grad_out.shape() != s {
        return Err(Error::dim(format!(
            "batch_norm grad_out shape {} does not match forward {}",
            grad_out.shape(),
            s
        )));
    }
    let m = s.n * s.h * s.w;
    let m_t = T::from_f64_lossy(m as f64);
    let mut grad_input = Tensor::zeros(s);
    let mut grad_gamma = Tensor::zeros(Shape::new(1, s.c, 1, 1)?);
    let mut grad_beta = Tensor::zeros(Shape::new(1, s.c, 1, 1)?);
    let hw = s.h * s.w;

    for j in 0..s.c {
        let g = ctx.gamma[j];
        let istd = ctx.inv_std[j];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..s.n {
            let base = (i * s.c + j) * hw;
            for k in 0..hw {
                let dy = grad_out.data()[base + k];
                sum_dy += dy;
                sum_dy_xhat += dy * ctx.xhat.data()[base + k];
            }
        }
        grad_gamma.data_mut()[j] = sum_dy_xhat;
        grad_beta.data_mut()[j] = sum_dy;
        for i in 0..s.n {
            let base = (i * s.c + j) * hw;
            for k in 0..hw {
                let dy = grad_out.data()[base + k];
                let xh = ctx.xhat.data()[base + k];
                grad_input.data_mut()[base + k] = if ctx.train {
                    g * istd * (dy - sum_dy / m_t - xh * sum_dy_xhat / m_t)
                } else {
                    g * istd * dy
                };
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

/// Eval-mode batch norm without context capture, for inference paths.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BnStats<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    check_affine(input, gamma, beta)?;
    let s = input.shape();
    if stats.mean.len() != s.c {
        return Err(Error::dim(format!(
            "running stats track {} channels, input has {}",
            stats.mean.len(),
            s.c
        )));
    }
    let mut out = Tensor::zeros(s);
    for j in 0..s.c {
        let istd = T::one() / (stats.var[j] + epsilon).sqrt();
        let g = gamma.data()[j];
        let b = beta.data()[j];
        let mu = stats.mean[j];
        for i in 0..s.n {
            for (o, &v) in out.plane_mut(i, j).iter_mut().zip(input.plane(i, j)) {
                *o = g * (v - mu) * istd + b;
            }
        }
    }
    Ok(out)
}

/// Saved state for [`group_norm_per_channel_backward`].
pub struct GnCtx<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

/// Normalizes every channel independently over its (h, w) plane, then
/// applies the per-channel affine transform.
pub fn group_norm_per_channel<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: T,
) -> Result<(Tensor<T>, GnCtx<T>)> {
    check_affine(input, gamma, beta)?;
    if epsilon <= T::zero() {
        return Err(Error::config("group_norm epsilon must be > 0"));
    }
    let s = input.shape();
    let hw = s.h * s.w;
    let m_t = T::from_f64_lossy(hw as f64);
    let mut out = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.n * s.c];

    for i in 0..s.n {
        for j in 0..s.c {
            let plane = input.plane(i, j);
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            let mu = acc / m_t;
            let mut sq = T::zero();
            for &v in plane {
                let d = v - mu;
                sq += d * d;
            }
            let istd = T::one() / (sq / m_t + epsilon).sqrt();
            inv_std[i * s.c + j] = istd;
            let g = gamma.data()[j];
            let b = beta.data()[j];
            let base = (i * s.c + j) * hw;
            for k in 0..hw {
                let xh = (input.data()[base + k] - mu) * istd;
                xhat.data_mut()[base + k] = xh;
                out.data_mut()[base + k] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        GnCtx {
            xhat,
            inv_std,
            gamma: gamma.data().to_vec(),
        },
    ))
}

pub fn group_norm_per_channel_backward<T: Scalar>(
    ctx: &GnCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = ctx.xhat.shape();
    if grad_out.shape() != s {
        return Err(Error::dim(format!(
            "group_norm grad_out shape {} does not match forward {}",
            grad_out.shape(),
            s
        )));
    }
    let hw = s.h * s.w;
    let m_t = T::from_f64_lossy(hw as f64);
    let mut grad_input = Tensor::zeros(s);
    let mut grad_gamma = Tensor::zeros(Shape::new(1, s.c, 1, 1)?);
    let mut grad_beta = Tensor::zeros(Shape::new(1, s.c, 1, 1)?);

    for i in 0..s.n {
        for j in 0..s.c {
            let g = ctx.gamma[j];
            let istd = ctx.inv_std[i * s.c + j];
            let base = (i * s.c + j) * hw;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for k in 0..hw {
                let dy = grad_out.data()[base + k];
                sum_dy += dy;
                sum_dy_xhat += dy * ctx.xhat.data()[base + k];
            }
            grad_gamma.data_mut()[j] += sum_dy_xhat;
            grad_beta.data_mut()[j] += sum_dy;
            for k in 0..hw {
                let dy = grad_out.data()[base + k];
                let xh = ctx.xhat.data()[base + k];
                grad_input.data_mut()[base + k] =
                    g * istd * (dy - sum_dy / m_t - xh * sum_dy_xhat / m_t);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
