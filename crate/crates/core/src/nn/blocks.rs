//! Depthwise-separable convolutions, their shuffled variant, and the
//! double-convolution blocks assembled from them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, BatchNorm2dCtx, Conv2dLayer, Conv2dLayerCtx};
use crate::nn::params::{Grads, Params, StatUpdate};
use crate::ops::{self, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial activations captured during a forward pass, keyed by layer
/// name; the matching gradients are captured by the backward pass.
pub type ProbeMap<T> = BTreeMap<String, Tensor<T>>;

/// 3x3 depthwise convolution (depth multiplier `km`, the "kernels per
/// layer") followed by a dense 1x1 pointwise convolution. Both stages
/// carry biases.
pub struct DepthwiseSeparableConv {
    pub depthwise: Conv2dLayer,
    pub pointwise: Conv2dLayer,
    pub c_in: usize,
    pub c_out: usize,
    pub km: usize,
}

pub struct DscCtx<T> {
    dw: Conv2dLayerCtx<T>,
    pw: Conv2dLayerCtx<T>,
}

impl DepthwiseSeparableConv {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        c_in: usize,
        c_out: usize,
        km: usize,
    ) -> Result<Self> {
        if km == 0 {
            return Err(Error::config(format!("{scope}: kernels per layer must be >= 1")));
        }
        let depthwise = Conv2dLayer::new(
            ps,
            rng,
            &format!("{scope}.depthwise"),
            c_in,
            c_in * km,
            3,
            1,
            c_in,
            true,
        )?;
        let pointwise = Conv2dLayer::new(
            ps,
            rng,
            &format!("{scope}.pointwise"),
            c_in * km,
            c_out,
            1,
            0,
            1,
            true,
        )?;
        Ok(DepthwiseSeparableConv {
            depthwise,
            pointwise,
            c_in,
            c_out,
            km,
        })
    }

    /// Closed-form trainable parameter count:
    /// c_in*km*9 + c_in*km + c_out*c_in*km + c_out.
    pub fn expected_param_count(c_in: usize, c_out: usize, km: usize) -> usize {
        c_in * km * 9 + c_in * km + c_out * c_in * km + c_out
    }

    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().c != self.c_in {
            return Err(Error::dim(format!(
                "separable conv expects {} input channels, got {}",
                self.c_in,
                x.shape().c
            )));
        }
        let mid = self.depthwise.forward(ps, x)?;
        self.pointwise.forward(ps, &mid)
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, DscCtx<T>)> {
        if x.shape().c != self.c_in {
            return Err(Error::dim(format!(
                "separable conv expects {} input channels, got {}",
                self.c_in,
                x.shape().c
            )));
        }
        let (mid, dw) = self.depthwise.forward_ctx(ps, x)?;
        let (out, pw) = self.pointwise.forward_ctx(ps, &mid)?;
        Ok((out, DscCtx { dw, pw }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: DscCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g_mid = self.pointwise.backward(ps, ctx.pw, grad_out, grads)?;
        self.depthwise.backward(ps, ctx.dw, &g_mid, grads)
    }
}

/// Depthwise stage as above, then a *grouped* 1x1 pointwise convolution
/// followed by a channel shuffle with the same group count.
pub struct ShuffledDepthwiseSeparableConv {
    pub depthwise: Conv2dLayer,
    pub pointwise: Conv2dLayer,
    pub c_in: usize,
    pub c_out: usize,
    pub km: usize,
    pub groups: usize,
}

pub struct SdscCtx<T> {
    dw: Conv2dLayerCtx<T>,
    pw: Conv2dLayerCtx<T>,
}

impl ShuffledDepthwiseSeparableConv {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        c_in: usize,
        c_out: usize,
        km: usize,
        groups: usize,
    ) -> Result<Self> {
        if km == 0 {
            return Err(Error::config(format!("{scope}: kernels per layer must be >= 1")));
        }
        if groups == 0 || (c_in * km) % groups != 0 || c_out % groups != 0 {
            return Err(Error::config(format!(
                "{scope}: shuffled conv needs c_in*km ({}) and c_out ({c_out}) divisible by groups {groups}",
                c_in * km
            )));
        }
        let depthwise = Conv2dLayer::new(
            ps,
            rng,
            &format!("{scope}.depthwise"),
            c_in,
            c_in * km,
            3,
            1,
            c_in,
            true,
        )?;
        let pointwise = Conv2dLayer::new(
            ps,
            rng,
            &format!("{scope}.pointwise"),
            c_in * km,
            c_out,
            1,
            0,
            groups,
            true,
        )?;
        Ok(ShuffledDepthwiseSeparableConv {
            depthwise,
            pointwise,
            c_in,
            c_out,
            km,
            groups,
        })
    }

    /// c_in*km*9 + c_in*km + c_out*(c_in*km)/g + c_out.
    pub fn expected_param_count(c_in: usize, c_out: usize, km: usize, groups: usize) -> usize {
        c_in * km * 9 + c_in * km + c_out * (c_in * km) / groups + c_out
    }

    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mid = self.depthwise.forward(ps, x)?;
        let grouped = self.pointwise.forward(ps, &mid)?;
        ops::channel_shuffle(&grouped, self.groups)
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, SdscCtx<T>)> {
        let (mid, dw) = self.depthwise.forward_ctx(ps, x)?;
        let (grouped, pw) = self.pointwise.forward_ctx(ps, &mid)?;
        let out = ops::channel_shuffle(&grouped, self.groups)?;
        Ok((out, SdscCtx { dw, pw }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: SdscCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g_grouped = ops::channel_shuffle_backward(grad_out, self.groups)?;
        let g_mid = self.pointwise.backward(ps, ctx.pw, &g_grouped, grads)?;
        self.depthwise.backward(ps, ctx.dw, &g_mid, grads)
    }
}

/// Either flavor of the separable convolution, for the first stage of a
/// double-convolution block.
pub enum SepConv {
    Classic(DepthwiseSeparableConv),
    Shuffled(ShuffledDepthwiseSeparableConv),
}

pub enum SepConvCtx<T> {
    Classic(DscCtx<T>),
    Shuffled(SdscCtx<T>),
}

impl SepConv {
    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            SepConv::Classic(c) => c.forward(ps, x),
            SepConv::Shuffled(s) => s.forward(ps, x),
        }
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, SepConvCtx<T>)> {
        match self {
            SepConv::Classic(c) => {
                let (y, ctx) = c.forward_ctx(ps, x)?;
                Ok((y, SepConvCtx::Classic(ctx)))
            }
            SepConv::Shuffled(s) => {
                let (y, ctx) = s.forward_ctx(ps, x)?;
                Ok((y, SepConvCtx::Shuffled(ctx)))
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: SepConvCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        match (self, ctx) {
            (SepConv::Classic(c), SepConvCtx::Classic(ctx)) => c.backward(ps, ctx, grad_out, grads),
            (SepConv::Shuffled(s), SepConvCtx::Shuffled(ctx)) => {
                s.backward(ps, ctx, grad_out, grads)
            }
            _ => Err(Error::Usage(
                "double conv backward received a context from the other variant".into(),
            )),
        }
    }
}

/// Two (separable conv -> batch norm -> relu) stages. The shuffled block
/// variant replaces only the first stage's convolution; the second stage
/// is always classic.
pub struct DoubleConvBlock {
    pub scope: String,
    pub conv1: SepConv,
    pub bn1: BatchNorm2d,
    pub conv2: DepthwiseSeparableConv,
    pub bn2: BatchNorm2d,
    pub c_out: usize,
}

pub struct DoubleConvBlockCtx<T> {
    conv1: SepConvCtx<T>,
    bn1: BatchNorm2dCtx<T>,
    bn1_out: Tensor<T>,
    conv2: DscCtx<T>,
    bn2: BatchNorm2dCtx<T>,
    bn2_out: Tensor<T>,
}

impl DoubleConvBlock {
    /// Classic variant. `mid` is the channel width between the two stages
    /// (equal to `c_out` in the encoder; the decoder narrows in two steps).
    #[allow(clippy::too_many_arguments)]
    pub fn new_classic<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        c_in: usize,
        mid: usize,
        c_out: usize,
        km: usize,
    ) -> Result<Self> {
        let conv1 = SepConv::Classic(DepthwiseSeparableConv::new(
            ps,
            rng,
            &format!("{scope}.conv1"),
            c_in,
            mid,
            km,
        )?);
        Self::finish(ps, rng, scope, conv1, mid, c_out, km)
    }

    /// Shuffled variant: the first stage uses the grouped pointwise
    /// convolution plus channel shuffle.
    #[allow(clippy::too_many_arguments)]
    pub fn new_shuffled<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        c_in: usize,
        mid: usize,
        c_out: usize,
        km: usize,
        groups: usize,
    ) -> Result<Self> {
        let conv1 = SepConv::Shuffled(ShuffledDepthwiseSeparableConv::new(
            ps,
            rng,
            &format!("{scope}.conv1"),
            c_in,
            mid,
            km,
            groups,
        )?);
        Self::finish(ps, rng, scope, conv1, mid, c_out, km)
    }

    fn finish<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        conv1: SepConv,
        mid: usize,
        c_out: usize,
        km: usize,
    ) -> Result<Self> {
        let bn1 = BatchNorm2d::new(ps, &format!("{scope}.bn1"), mid)?;
        let conv2 =
            DepthwiseSeparableConv::new(ps, rng, &format!("{scope}.conv2"), mid, c_out, km)?;
        let bn2 = BatchNorm2d::new(ps, &format!("{scope}.bn2"), c_out)?;
        Ok(DoubleConvBlock {
            scope: scope.to_string(),
            conv1,
            bn1,
            conv2,
            bn2,
            c_out,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y1 = self.conv1.forward(ps, x)?;
        let r1 = ops::relu(&self.bn1.forward(ps, &y1)?);
        let y2 = self.conv2.forward(ps, &r1)?;
        Ok(ops::relu(&self.bn2.forward(ps, &y2)?))
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut Vec<StatUpdate<T>>,
        mut probes: Option<&mut ProbeMap<T>>,
    ) -> Result<(Tensor<T>, DoubleConvBlockCtx<T>)> {
        let (y1, conv1) = self.conv1.forward_ctx(ps, x)?;
        if let Some(p) = probes.as_deref_mut() {
            p.insert(format!("{}.conv1", self.scope), y1.clone());
        }
        let (b1, bn1) = self.bn1.forward_ctx(ps, &y1, mode, updates)?;
        let r1 = ops::relu(&b1);
        let (y2, conv2) = self.conv2.forward_ctx(ps, &r1)?;
        if let Some(p) = probes.as_deref_mut() {
            p.insert(format!("{}.conv2", self.scope), y2.clone());
        }
        let (b2, bn2) = self.bn2.forward_ctx(ps, &y2, mode, updates)?;
        let out = ops::relu(&b2);
        Ok((
            out,
            DoubleConvBlockCtx {
                conv1,
                bn1,
                bn1_out: b1,
                conv2,
                bn2,
                bn2_out: b2,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: DoubleConvBlockCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
        mut probes: Option<&mut ProbeMap<T>>,
    ) -> Result<Tensor<T>> {
        let g_b2 = ops::relu_backward(&ctx.bn2_out, grad_out);
        let g_y2 = self.bn2.backward(ctx.bn2, &g_b2, grads)?;
        if let Some(p) = probes.as_deref_mut() {
            p.insert(format!("{}.conv2", self.scope), g_y2.clone());
        }
        let g_r1 = self.conv2.backward(ps, ctx.conv2, &g_y2, grads)?;
        let g_b1 = ops::relu_backward(&ctx.bn1_out, &g_r1);
        let g_y1 = self.bn1.backward(ctx.bn1, &g_b1, grads)?;
        if let Some(p) = probes.as_deref_mut() {
            p.insert(format!("{}.conv1", self.scope), g_y1.clone());
        }
        self.conv1.backward(ps, ctx.conv1, &g_y1, grads)
    }

    /// Trainable parameters registered under this block's scope.
    pub fn param_count<T: Scalar>(&self, ps: &Params<T>) -> usize {
        ps.param_count_prefix(&format!("{}.", self.scope))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dsc_param_count_matches_formula() {
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        DepthwiseSeparableConv::new(&mut ps, &mut rng, "dsc", 4, 8, 3).unwrap();
        assert_eq!(ps.param_count(), 224);
        assert_eq!(
            DepthwiseSeparableConv::expected_param_count(4, 8, 3),
            4 * 3 * 9 + 12 + 8 * 12 + 8
        );
        assert_eq!(ps.param_count(), DepthwiseSeparableConv::expected_param_count(4, 8, 3));
    }

    #[test]
    fn sdsc_param_count_matches_formula_and_beats_classic() {
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ShuffledDepthwiseSeparableConv::new(&mut ps, &mut rng, "sdsc", 32, 64, 3, 16).unwrap();
        // 32*3*9 + 96 + 64*96/16 + 64
        assert_eq!(ps.param_count(), 1408);
        assert_eq!(
            ShuffledDepthwiseSeparableConv::expected_param_count(32, 64, 3, 16),
            32 * 3 * 9 + 96 + 64 * 96 / 16 + 64
        );
        // strictly below the unshuffled variant for g > 1
        assert_eq!(
            DepthwiseSeparableConv::expected_param_count(32, 64, 3),
            32 * 3 * 9 + 96 + 64 * 96 + 64
        );
        assert!(
            ShuffledDepthwiseSeparableConv::expected_param_count(32, 64, 3, 16)
                < DepthwiseSeparableConv::expected_param_count(32, 64, 3)
        );
    }

    #[test]
    fn zero_weights_output_broadcast_bias() {
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dsc = DepthwiseSeparableConv::new(&mut ps, &mut rng, "d", 2, 3, 1).unwrap();
        for id in ps.trainable_ids() {
            ps.get_mut(id).fill(0.0);
        }
        // give the pointwise bias distinct values
        let bias_id = dsc.pointwise.bias.unwrap();
        *ps.get_mut(bias_id) =
            Tensor::from_vec(Shape::new(1, 3, 1, 1).unwrap(), vec![1.0, -2.0, 0.5]).unwrap();
        let x = Tensor::<f64>::ones(Shape::new(1, 2, 4, 4).unwrap());
        let y = dsc.forward(&ps, &x).unwrap();
        for (j, want) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            assert!(y.plane(0, j).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn pointwise_only_reduces_to_1x1_conv_oracle() {
        // depthwise = identity-center kernels with km = 1, so the block
        // acts as a plain 1x1 convolution.
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dsc = DepthwiseSeparableConv::new(&mut ps, &mut rng, "d", 3, 5, 1).unwrap();
        let mut ident = Tensor::<f64>::zeros(Shape::new(3, 1, 3, 3).unwrap());
        for c in 0..3 {
            *ident.at_mut(c, 0, 1, 1) = 1.0;
        }
        *ps.get_mut(dsc.depthwise.weight) = ident;
        ps.get_mut(dsc.depthwise.bias.unwrap()).fill(0.0);
        let x = Tensor::<f64>::rand_uniform(Shape::new(2, 3, 4, 4).unwrap(), -1.0, 1.0, &mut rng);
        let got = dsc.forward(&ps, &x).unwrap();
        let want = crate::ops::conv2d(
            &x,
            ps.get(dsc.pointwise.weight),
            Some(ps.get(dsc.pointwise.bias.unwrap())),
            1,
            0,
            1,
        )
        .unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn sdsc_with_one_group_equals_dsc_given_identical_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps1 = Params::<f64>::new();
        let sdsc =
            ShuffledDepthwiseSeparableConv::new(&mut ps1, &mut rng, "s", 4, 6, 2, 1).unwrap();
        let mut ps2 = Params::<f64>::new();
        let dsc = DepthwiseSeparableConv::new(&mut ps2, &mut rng, "d", 4, 6, 2).unwrap();
        // copy weights across
        *ps2.get_mut(dsc.depthwise.weight) = ps1.get(sdsc.depthwise.weight).clone();
        *ps2.get_mut(dsc.depthwise.bias.unwrap()) = ps1.get(sdsc.depthwise.bias.unwrap()).clone();
        *ps2.get_mut(dsc.pointwise.weight) = ps1.get(sdsc.pointwise.weight).clone();
        *ps2.get_mut(dsc.pointwise.bias.unwrap()) = ps1.get(sdsc.pointwise.bias.unwrap()).clone();
        let x = Tensor::<f64>::rand_uniform(Shape::new(1, 4, 5, 5).unwrap(), -1.0, 1.0, &mut rng);
        let a = sdsc.forward(&ps1, &x).unwrap();
        let b = dsc.forward(&ps2, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sdsc_interleaves_group_outputs() {
        // zero weights, distinct per-group pointwise biases: after the
        // shuffle the group constants must interleave.
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sdsc =
            ShuffledDepthwiseSeparableConv::new(&mut ps, &mut rng, "s", 4, 6, 3, 2).unwrap();
        for id in ps.trainable_ids() {
            ps.get_mut(id).fill(0.0);
        }
        // group 0 -> bias 1.0 on channels 0..3, group 1 -> bias 2.0 on 3..6
        *ps.get_mut(sdsc.pointwise.bias.unwrap()) = Tensor::from_vec(
            Shape::new(1, 6, 1, 1).unwrap(),
            vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0],
        )
        .unwrap();
        let x = Tensor::<f64>::ones(Shape::new(1, 4, 2, 2).unwrap());
        let y = sdsc.forward(&ps, &x).unwrap();
        let pattern: Vec<f64> = (0..6).map(|j| y.plane(0, j)[0]).collect();
        assert_eq!(pattern, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn divisibility_violation_is_a_construction_error() {
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        match ShuffledDepthwiseSeparableConv::new(&mut ps, &mut rng, "s", 4, 6, 3, 5) {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("expected configuration error, got {other}"),
            Ok(_) => panic!("construction should have failed"),
        }
    }

    #[test]
    fn double_conv_block_shapes_and_probe_keys() {
        let mut ps = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block =
            DoubleConvBlock::new_shuffled(&mut ps, &mut rng, "encoder.level2", 4, 8, 8, 2, 4)
                .unwrap();
        let x = Tensor::<f64>::rand_uniform(Shape::new(2, 4, 6, 6).unwrap(), -1.0, 1.0, &mut rng);
        let mut updates = Vec::new();
        let mut probes = ProbeMap::new();
        let (y, _) = block
            .forward_ctx(&ps, &x, Mode::Train, &mut updates, Some(&mut probes))
            .unwrap();
        assert_eq!(y.shape().dims(), [2, 8, 6, 6]);
        assert!(probes.contains_key("encoder.level2.conv1"));
        assert!(probes.contains_key("encoder.level2.conv2"));
        assert_eq!(
            block.param_count(&ps),
            ShuffledDepthwiseSeparableConv::expected_param_count(4, 8, 2, 4)
                + DepthwiseSeparableConv::expected_param_count(8, 8, 2)
                + 2 * 8
                + 2 * 8
        );
    }
}
