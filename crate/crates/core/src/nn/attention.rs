//! Attention modules: Shuffle Attention (the architecture's choice) and
//! CBAM (kept as the parameter-parity baseline).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2dLayer, Conv2dLayerCtx};
use crate::nn::params::{Grads, ParamId, Params};
use crate::ops::{self, GnCtx};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// y[n, c, ., .] = x[n, c, ., .] * s[n, c] with `s` shaped (n, c, 1, 1).
fn scale_per_channel<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    let mut out = Tensor::zeros(sh);
    for i in 0..sh.n {
        for j in 0..sh.c {
            let k = s.data()[i * sh.c + j];
            for (o, &v) in out.plane_mut(i, j).iter_mut().zip(x.plane(i, j)) {
                *o = v * k;
            }
        }
    }
    out
}

/// Per-(n, c) sums over the spatial plane: returns (n, c, 1, 1).
fn sum_per_channel<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, 1, 1).expect("valid"));
    for i in 0..sh.n {
        for j in 0..sh.c {
            let mut acc = T::zero();
            for &v in x.plane(i, j) {
                acc += v;
            }
            out.data_mut()[i * sh.c + j] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shuffle Attention
// ---------------------------------------------------------------------------

/// Splits each of `groups` channel groups in half; the first half is gated
/// per channel from its global average, the second per position from its
/// per-channel normalization. The halves are re-merged and the channels
/// shuffled across groups. Branch parameters are shared across groups.
pub struct ShuffleAttention {
    pub scope: String,
    pub groups: usize,
    pub channels: usize,
    half: usize,
    cweight: ParamId,
    cbias: ParamId,
    sweight: ParamId,
    sbias: ParamId,
    gn_gamma: ParamId,
    gn_beta: ParamId,
    epsilon: f64,
}

struct SaGroupCtx<T> {
    a: Tensor<T>,
    gap: Tensor<T>,
    cgate: Tensor<T>,
    b: Tensor<T>,
    gn: GnCtx<T>,
    normed: Tensor<T>,
    sgate: Tensor<T>,
}

pub struct ShuffleAttentionCtx<T> {
    groups: Vec<SaGroupCtx<T>>,
}

impl ShuffleAttention {
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        scope: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % (2 * groups) != 0 {
            return Err(Error::config(format!(
                "{scope}: shuffle attention needs channels ({channels}) divisible by 2*groups ({})",
                2 * groups
            )));
        }
        let half = channels / (2 * groups);
        let vec_shape = Shape::new(1, half, 1, 1)?;
        Ok(ShuffleAttention {
            scope: scope.to_string(),
            groups,
            channels,
            half,
            cweight: ps.register(format!("{scope}.cweight"), Tensor::zeros(vec_shape)),
            cbias: ps.register(format!("{scope}.cbias"), Tensor::ones(vec_shape)),
            sweight: ps.register(format!("{scope}.sweight"), Tensor::zeros(vec_shape)),
            sbias: ps.register(format!("{scope}.sbias"), Tensor::ones(vec_shape)),
            gn_gamma: ps.register(format!("{scope}.gn.gamma"), Tensor::ones(vec_shape)),
            gn_beta: ps.register(format!("{scope}.gn.beta"), Tensor::zeros(vec_shape)),
            epsilon: 1e-5,
        })
    }

    /// 6 * channels / (2 * groups): four gating vectors plus the GN affine.
    pub fn expected_param_count(channels: usize, groups: usize) -> usize {
        6 * channels / (2 * groups)
    }

    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(ps, x)?.0)
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ShuffleAttentionCtx<T>)> {
        let (y, ctx) = self.run(ps, x)?;
        Ok((y, ctx))
    }

    fn run<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ShuffleAttentionCtx<T>)> {
        let sh = x.shape();
        if sh.c != self.channels {
            return Err(Error::dim(format!(
                "shuffle attention built for {} channels, input has {}",
                self.channels, sh.c
            )));
        }
        let cg = 2 * self.half;
        let cw = ps.get(self.cweight);
        let cb = ps.get(self.cbias);
        let sw = ps.get(self.sweight);
        let sb = ps.get(self.sbias);
        let eps = T::from_f64_lossy(self.epsilon);

        let mut merged = Tensor::zeros(sh);
        let mut group_ctxs = Vec::with_capacity(self.groups);
        for k in 0..self.groups {
            let lo = k * cg;
            let a = x.slice_channels(lo, lo + self.half)?;
            let b = x.slice_channels(lo + self.half, lo + cg)?;

            // channel branch: per-channel gate from the global average
            let gap = ops::global_avg_pool(&a);
            let mut t = Tensor::zeros(gap.shape());
            for i in 0..sh.n {
                for j in 0..self.half {
                    t.data_mut()[i * self.half + j] =
                        cw.data()[j] * gap.data()[i * self.half + j] + cb.data()[j];
                }
            }
            let cgate = ops::sigmoid(&t);
            let out_a = scale_per_channel(&a, &cgate);

            // spatial branch: per-position gate from the normalized map
            let (normed, gn) =
                ops::group_norm_per_channel(&b, ps.get(self.gn_gamma), ps.get(self.gn_beta), eps)?;
            let mut t2 = Tensor::zeros(normed.shape());
            for i in 0..sh.n {
                for j in 0..self.half {
                    let wv = sw.data()[j];
                    let bv = sb.data()[j];
                    for (o, &v) in t2
                        .plane_mut(i, j)
                        .iter_mut()
                        .zip(normed.plane(i, j))
                    {
                        *o = wv * v + bv;
                    }
                }
            }
            let sgate = ops::sigmoid(&t2);
            let out_b = b.mul(&sgate)?;

            merged.paste_channels(lo, &out_a)?;
            merged.paste_channels(lo + self.half, &out_b)?;
            group_ctxs.push(SaGroupCtx {
                a,
                gap,
                cgate,
                b,
                gn,
                normed,
                sgate,
            });
        }
        let out = ops::channel_shuffle(&merged, self.groups)?;
        Ok((out, ShuffleAttentionCtx { groups: group_ctxs }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: ShuffleAttentionCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let sh = grad_out.shape();
        let cg = 2 * self.half;
        let g_merged = ops::channel_shuffle_backward(grad_out, self.groups)?;
        let mut grad_input = Tensor::zeros(sh);
        let cw = ps.get(self.cweight).clone();
        let sw = ps.get(self.sweight).clone();
        let hw = T::from_f64_lossy((sh.h * sh.w) as f64);

        for (k, gctx) in ctx.groups.into_iter().enumerate() {
            let lo = k * cg;
            let g_a_out = g_merged.slice_channels(lo, lo + self.half)?;
            let g_b_out = g_merged.slice_channels(lo + self.half, lo + cg)?;

            // channel branch
            let mut d_a = scale_per_channel(&g_a_out, &gctx.cgate);
            let dgate = sum_per_channel(&g_a_out.mul(&gctx.a)?);
            let dt = dgate
                .zip(&gctx.cgate, |g, s| g * s * (T::one() - s))
                .expect("gate shapes agree");
            let mut dcw = Tensor::zeros(Shape::new(1, self.half, 1, 1)?);
            let mut dcb = Tensor::zeros(Shape::new(1, self.half, 1, 1)?);
            let mut dgap = Tensor::zeros(dt.shape());
            for i in 0..sh.n {
                for j in 0..self.half {
                    let idx = i * self.half + j;
                    dcw.data_mut()[j] += dt.data()[idx] * gctx.gap.data()[idx];
                    dcb.data_mut()[j] += dt.data()[idx];
                    dgap.data_mut()[idx] = dt.data()[idx] * cw.data()[j];
                }
            }
            // spread d(gap) back over the plane
            for i in 0..sh.n {
                for j in 0..self.half {
                    let add = dgap.data()[i * self.half + j] / hw;
                    for v in d_a.plane_mut(i, j) {
                        *v += add;
                    }
                }
            }
            grads.accumulate(self.cweight, &dcw)?;
            grads.accumulate(self.cbias, &dcb)?;

            // spatial branch
            let mut d_b = g_b_out.mul(&gctx.sgate)?;
            let ds = g_b_out.mul(&gctx.b)?;
            let dt2 = ds
                .zip(&gctx.sgate, |g, s| g * s * (T::one() - s))
                .expect("gate shapes agree");
            let mut dsw = Tensor::zeros(Shape::new(1, self.half, 1, 1)?);
            let mut dsb = Tensor::zeros(Shape::new(1, self.half, 1, 1)?);
            let mut d_normed = Tensor::zeros(dt2.shape());
            for i in 0..sh.n {
                for j in 0..self.half {
                    let wv = sw.data()[j];
                    let mut acc_w = T::zero();
                    let mut acc_b = T::zero();
                    for (idx, &g) in dt2.plane(i, j).iter().enumerate() {
                        acc_w += g * gctx.normed.plane(i, j)[idx];
                        acc_b += g;
                        d_normed.plane_mut(i, j)[idx] = g * wv;
                    }
                    dsw.data_mut()[j] += acc_w;
                    dsb.data_mut()[j] += acc_b;
                }
            }
            grads.accumulate(self.sweight, &dsw)?;
            grads.accumulate(self.sbias, &dsb)?;
            let (d_b2, d_gn_gamma, d_gn_beta) =
                ops::group_norm_per_channel_backward(&gctx.gn, &d_normed)?;
            d_b.add_assign(&d_b2)?;
            grads.accumulate(self.gn_gamma, &d_gn_gamma)?;
            grads.accumulate(self.gn_beta, &d_gn_beta)?;

            grad_input.paste_channels(lo, &d_a)?;
            grad_input.paste_channels(lo + self.half, &d_b)?;
        }
        Ok(grad_input)
    }
}

// ---------------------------------------------------------------------------
// CBAM (baseline)
// ---------------------------------------------------------------------------

/// Sequential channel attention (shared MLP over average- and max-pooled
/// descriptors) then spatial attention (7x7 conv over stacked channel
/// mean/max maps).
pub struct Cbam {
    pub scope: String,
    pub channels: usize,
    pub reduction: usize,
    fc1: Conv2dLayer,
    fc2: Conv2dLayer,
    spatial: Conv2dLayer,
}

pub struct CbamCtx<T> {
    x: Tensor<T>,
    max_argmax: Vec<usize>,
    fc1_avg: Conv2dLayerCtx<T>,
    fc1_avg_out: Tensor<T>,
    fc2_avg: Conv2dLayerCtx<T>,
    fc1_max: Conv2dLayerCtx<T>,
    fc1_max_out: Tensor<T>,
    fc2_max: Conv2dLayerCtx<T>,
    cgate: Tensor<T>,
    x1: Tensor<T>,
    chan_argmax: Vec<usize>,
    spatial: Conv2dLayerCtx<T>,
    sgate: Tensor<T>,
}

/// Mean over the channel axis: (n, c, h, w) -> (n, 1, h, w).
fn channel_mean_map<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    let inv = T::one() / T::from_f64_lossy(sh.c as f64);
    let mut out = Tensor::zeros(Shape::new(sh.n, 1, sh.h, sh.w).expect("valid"));
    for i in 0..sh.n {
        for j in 0..sh.c {
            let plane = x.plane(i, j);
            for (o, &v) in out.plane_mut(i, 0).iter_mut().zip(plane) {
                *o += v * inv;
            }
        }
    }
    out
}

/// Max over the channel axis with the winning channel per pixel (first
/// maximum wins).
fn channel_max_map<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let sh = x.shape();
    let hw = sh.h * sh.w;
    let mut out = Tensor::zeros(Shape::new(sh.n, 1, sh.h, sh.w).expect("valid"));
    let mut argmax = vec![0usize; sh.n * hw];
    for i in 0..sh.n {
        let first = x.plane(i, 0);
        out.plane_mut(i, 0).copy_from_slice(first);
        for j in 1..sh.c {
            let plane = x.plane(i, j);
            let best = out.plane_mut(i, 0);
            for (k, (&v, b)) in plane.iter().zip(best.iter_mut()).enumerate() {
                if v > *b {
                    *b = v;
                    argmax[i * hw + k] = j;
                }
            }
        }
    }
    (out, argmax)
}

impl Cbam {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut Params<T>,
        rng: &mut R,
        scope: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "{scope}: CBAM needs channels ({channels}) divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let fc1 = Conv2dLayer::new(ps, rng, &format!("{scope}.fc1"), channels, hidden, 1, 0, 1, true)?;
        let fc2 = Conv2dLayer::new(ps, rng, &format!("{scope}.fc2"), hidden, channels, 1, 0, 1, true)?;
        let spatial = Conv2dLayer::new(ps, rng, &format!("{scope}.spatial"), 2, 1, 7, 3, 1, true)?;
        Ok(Cbam {
            scope: scope.to_string(),
            channels,
            reduction,
            fc1,
            fc2,
            spatial,
        })
    }

    /// 2*c*(c/r) + c/r + c (MLP with biases) + 7*7*2 + 1 (spatial conv).
    pub fn expected_param_count(channels: usize, reduction: usize) -> usize {
        let hidden = channels / reduction;
        2 * channels * hidden + hidden + channels + 7 * 7 * 2 + 1
    }

    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(ps, x)?.0)
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, CbamCtx<T>)> {
        self.run(ps, x)
    }

    fn run<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<(Tensor<T>, CbamCtx<T>)> {
        if x.shape().c != self.channels {
            return Err(Error::dim(format!(
                "CBAM built for {} channels, input has {}",
                self.channels,
                x.shape().c
            )));
        }
        let avg = ops::global_avg_pool(x);
        let (mx, max_argmax) = ops::global_max_pool(x);

        let (fc1_avg_out, fc1_avg) = self.fc1.forward_ctx(ps, &avg)?;
        let (a1, fc2_avg) = self.fc2.forward_ctx(ps, &ops::relu(&fc1_avg_out))?;
        let (fc1_max_out, fc1_max) = self.fc1.forward_ctx(ps, &mx)?;
        let (a2, fc2_max) = self.fc2.forward_ctx(ps, &ops::relu(&fc1_max_out))?;
        let cgate = ops::sigmoid(&a1.add(&a2)?);
        let x1 = scale_per_channel(x, &cgate);

        let cmean = channel_mean_map(&x1);
        let (cmax, chan_argmax) = channel_max_map(&x1);
        let sp_in = ops::concat_channels(&cmean, &cmax)?;
        let (sp, spatial) = self.spatial.forward_ctx(ps, &sp_in)?;
        let sgate = ops::sigmoid(&sp);

        // broadcast the (n, 1, h, w) gate over channels
        let sh = x.shape();
        let mut out = Tensor::zeros(sh);
        for i in 0..sh.n {
            for j in 0..sh.c {
                let gate = sgate.plane(i, 0);
                for ((o, &v), &g) in out
                    .plane_mut(i, j)
                    .iter_mut()
                    .zip(x1.plane(i, j))
                    .zip(gate)
                {
                    *o = v * g;
                }
            }
        }
        Ok((
            out,
            CbamCtx {
                x: x.clone(),
                max_argmax,
                fc1_avg,
                fc1_avg_out,
                fc2_avg,
                fc1_max,
                fc1_max_out,
                fc2_max,
                cgate,
                x1,
                chan_argmax,
                spatial,
                sgate,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: CbamCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let sh = grad_out.shape();
        let hw = sh.h * sh.w;

        // through the spatial gate: y = x1 * sg
        let mut d_x1 = Tensor::zeros(sh);
        let mut d_sgate = Tensor::zeros(ctx.sgate.shape());
        for i in 0..sh.n {
            for j in 0..sh.c {
                let gate = ctx.sgate.plane(i, 0);
                let go = grad_out.plane(i, j);
                let x1p = ctx.x1.plane(i, j);
                let dxp = d_x1.plane_mut(i, j);
                for k in 0..hw {
                    dxp[k] += go[k] * gate[k];
                }
                let dsg = d_sgate.plane_mut(i, 0);
                for k in 0..hw {
                    dsg[k] += go[k] * x1p[k];
                }
            }
        }
        let d_sp = d_sgate
            .zip(&ctx.sgate, |g, s| g * s * (T::one() - s))
            .expect("gate shapes agree");
        let d_sp_in = self.spatial.backward(ps, ctx.spatial, &d_sp, grads)?;
        let (d_cmean, d_cmax) = ops::concat_channels_backward(&d_sp_in, 1)?;

        // channel-mean map backward: spread /c; channel-max: scatter
        let inv_c = T::one() / T::from_f64_lossy(sh.c as f64);
        for i in 0..sh.n {
            for j in 0..sh.c {
                let dm = d_cmean.plane(i, 0);
                let dxp = d_x1.plane_mut(i, j);
                for k in 0..hw {
                    dxp[k] += dm[k] * inv_c;
                }
            }
            for k in 0..hw {
                let j = ctx.chan_argmax[i * hw + k];
                *d_x1.at_mut(i, j, k / sh.w, k % sh.w) += d_cmax.plane(i, 0)[k];
            }
        }

        // through the channel gate: x1 = x * cg
        let mut d_x = scale_per_channel(&d_x1, &ctx.cgate);
        let d_cgate = sum_per_channel(&d_x1.mul(&ctx.x)?);
        let d_a = d_cgate
            .zip(&ctx.cgate, |g, s| g * s * (T::one() - s))
            .expect("gate shapes agree");

        // shared MLP, average branch
        let d_h_avg = self.fc2.backward(ps, ctx.fc2_avg, &d_a, grads)?;
        let d_fc1_avg = ops::relu_backward(&ctx.fc1_avg_out, &d_h_avg);
        let d_avg = self.fc1.backward(ps, ctx.fc1_avg, &d_fc1_avg, grads)?;
        let d_from_avg = ops::global_avg_pool_backward(sh, &d_avg);
        d_x.add_assign(&d_from_avg)?;

        // shared MLP, max branch
        let d_h_max = self.fc2.backward(ps, ctx.fc2_max, &d_a, grads)?;
        let d_fc1_max = ops::relu_backward(&ctx.fc1_max_out, &d_h_max);
        let d_mx = self.fc1.backward(ps, ctx.fc1_max, &d_fc1_max, grads)?;
        let d_from_max = ops::global_max_pool_backward(sh, &ctx.max_argmax, &d_mx);
        d_x.add_assign(&d_from_max)?;

        Ok(d_x)
    }
}

/// The per-level attention module of the model.
pub enum Attention {
    Sa(ShuffleAttention),
    Cbam(Cbam),
}

pub enum AttentionCtx<T> {
    Sa(ShuffleAttentionCtx<T>),
    Cbam(CbamCtx<T>),
}

impl Attention {
    pub fn forward<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Attention::Sa(sa) => sa.forward(ps, x),
            Attention::Cbam(c) => c.forward(ps, x),
        }
    }

    pub fn forward_ctx<T: Scalar>(
        &self,
        ps: &Params<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttentionCtx<T>)> {
        match self {
            Attention::Sa(sa) => {
                let (y, ctx) = sa.forward_ctx(ps, x)?;
                Ok((y, AttentionCtx::Sa(ctx)))
            }
            Attention::Cbam(c) => {
                let (y, ctx) = c.forward_ctx(ps, x)?;
                Ok((y, AttentionCtx::Cbam(ctx)))
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &Params<T>,
        ctx: AttentionCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        match (self, ctx) {
            (Attention::Sa(sa), AttentionCtx::Sa(ctx)) => sa.backward(ps, ctx, grad_out, grads),
            (Attention::Cbam(c), AttentionCtx::Cbam(ctx)) => c.backward(ps, ctx, grad_out, grads),
            _ => Err(Error::Usage(
                "attention backward received a context from the other variant".into(),
            )),
        }
    }
}
