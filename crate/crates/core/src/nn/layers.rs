//! Elementary trainable layers: convolution and batch normalization,
//! wired to the parameter store.

use rand::Rng;

use crate::error::Result;
use crate::nn::params::{kaiming_uniform, Grads, ParamId, Params, StatUpdate};
use crate::ops::{self, BnStats, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A 2-D convolution layer with registered weight/bias.
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub struct Conv2dLayerCtx<T> {
    input: Tensor<T>,
}

impl Conv2dLayer {
    /// Registers `scope.weight` / `scope.bias`. Weights are
    /// Kaiming-uniform with fan-in = (c_in/groups)*k*k, biases zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(crate::error::Error::config(format!(
                "{scope}: channels ({c_in} -> {c_out}) not divisible by groups {groups}"
            )));
        }
        let cpg = c_in / groups;
        let fan_in = cpg * kernel * kernel;
        let w = kaiming_uniform(Shape::new(c_out, cpg, kernel, kernel)?, fan_in, rng);
        let weight = ps.register(format!("{scope}.weight"), w);
        let bias = if bias {
            Some(ps.register(
                format!("{scope}.bias"),
                Tensor::zeros(Shape::new(1, c_out, 1, 1)?),
            ))
        } else {
            None
        };
        Ok(Conv2dLayer {
            weight,
            bias,
            stride: 1,
            padding,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(
            x,
            ps.get(self.weight),
            self.bias.map(|b| ps.get(b)),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Conv2dLayerCtx<T>)> {
        let y = self.forward(ps, x)?;
        Ok((y, Conv2dLayerCtx { input: x.clone() }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: Conv2dLayerCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (gx, gw, gb) = ops::conv2d_grads(
            &ctx.input,
            ps.get(self.weight),
            self.bias.is_some(),
            self.stride,
            self.padding,
            self.groups,
            grad_out,
        )?;
        grads.accumulate(self.weight, &gw)?;
        if let (Some(b), Some(gb)) = (self.bias, gb) {
            grads.accumulate(b, &gb)?;
        }
        Ok(gx)
    }
}

/// Batch normalization layer; running statistics live in the store as
/// buffers so they travel with checkpoints.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub epsilon: f64,
}

pub struct BatchNorm2dCtx<T> {
    inner: ops::BnCtx<T>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut Params<T>, scope: &str, channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1)?;
        Ok(BatchNorm2d {
            gamma: ps.register(format!("{scope}.gamma"), Tensor::ones(shape)),
            beta: ps.register(format!("{scope}.beta"), Tensor::zeros(shape)),
            running_mean: ps.register_buffer(format!("{scope}.running_mean"), Tensor::zeros(shape)),
            running_var: ps.register_buffer(format!("{scope}.running_var"), Tensor::ones(shape)),
            momentum: 0.1,
            epsilon: 1e-5,
        })
    }

    fn stats<T: Scalar>(&self, ps: &Params<T>) -> BnStats<T> {
        BnStats {
            mean: ps.get(self.running_mean).data().to_vec(),
            var: ps.get(self.running_var).data().to_vec(),
        }
    }

    /// Eval-mode forward without context capture.
    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm_eval(
            x,
            ps.get(self.gamma),
            ps.get(self.beta),
            &self.stats(ps),
            T::from_f64_lossy(self.epsilon),
        )
    }

    /// Forward with context. In train mode the new running statistics are
    /// appended to `updates` for the caller to commit; the store itself is
    /// not touched.
    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<(Tensor<T>, BatchNorm2dCtx<T>)> {
        let mut stats = self.stats(ps);
        let (y, inner) = ops::batch_norm(
            x,
            ps.get(self.gamma),
            ps.get(self.beta),
            &mut stats,
            mode,
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.epsilon),
        )?;
        if mode == Mode::Train {
            let c = stats.mean.len();
            updates.push(StatUpdate {
                id: self.running_mean,
                value: Tensor::from_vec(Shape::new(1, c, 1, 1)?, stats.mean)?,
            });
            updates.push(StatUpdate {
                id: self.running_var,
                value: Tensor::from_vec(Shape::new(1, c, 1, 1)?, stats.var)?,
            });
        }
        Ok((y, BatchNorm2dCtx { inner }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ctx: BatchNorm2dCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (gx, ggamma, gbeta) = ops::batch_norm_backward(&ctx.inner, grad_out)?;
        grads.accumulate(self.gamma, &ggamma)?;
        grads.accumulate(self.beta, &gbeta)?;
        Ok(gx)
    }
}
