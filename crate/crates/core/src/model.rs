//! SSA-UNet assembly: a five-level encoder of (shuffled) double-conv
//! blocks with per-level attention, a four-level bilinear-upsampling
//! decoder with skip connections, the 1x1 output head, the persistence
//! baseline, and the "SSAC v1" checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::nn::blocks::{DoubleConvBlock, DoubleConvBlockCtx, ProbeMap};
use crate::nn::layers::{Conv2dLayer, Conv2dLayerCtx};
use crate::nn::params::{Grads, Params, StatUpdate};
use crate::nn::{Attention, AttentionCtx, Cbam, ShuffleAttention};
use crate::ops::{self, MaxPoolCtx, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Which attention module sits at each encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Shuffle,
    Cbam,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Shuffle => "shuffle",
            AttentionKind::Cbam => "cbam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(AttentionKind::Shuffle),
            "cbam" => Ok(AttentionKind::Cbam),
            other => Err(Error::config(format!("unknown attention kind \"{other}\""))),
        }
    }
}

/// Full architectural hyperparameter record.
///
/// `widths` are the nominal per-level channel widths; with bilinear
/// upsampling the bottleneck runs at `widths[4] / 2` and each decoder
/// block narrows through mid = in/2, the convention of the baseline this
/// architecture extends (and the one that reproduces its parameter
/// counts).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder kernels-per-layer: 3 standard, 2 reduced.
    pub kernels_per_layer: usize,
    /// Decoder kernels-per-layer; fixed at 2 in both published variants.
    pub decoder_kernels_per_layer: usize,
    pub widths: [usize; 5],
    /// Grouped-pointwise group sizes of encoder levels 2..5.
    pub shuffle_groups: [usize; 4],
    /// Shuffle Attention group sizes per encoder level.
    pub sa_groups: [usize; 5],
    pub attention: AttentionKind,
    /// When false, all encoder blocks are classic (the CBAM baseline).
    pub shuffled_convs: bool,
    pub cbam_reduction: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The standard variant: shuffled encoder blocks with 3 kernels per
    /// layer and Shuffle Attention.
    pub fn ssa_unet(in_channels: usize, out_channels: usize) -> Self {
        ModelConfig {
            in_channels,
            out_channels,
            kernels_per_layer: 3,
            decoder_kernels_per_layer: 2,
            widths: [64, 128, 256, 512, 1024],
            shuffle_groups: [16, 16, 32, 32],
            sa_groups: [2, 4, 8, 16, 32],
            attention: AttentionKind::Shuffle,
            shuffled_convs: true,
            cbam_reduction: 16,
            seed: 0,
        }
    }

    /// The reduced variant: 2 kernels per layer.
    pub fn ssa_unet_reduced(in_channels: usize, out_channels: usize) -> Self {
        ModelConfig {
            kernels_per_layer: 2,
            ..Self::ssa_unet(in_channels, out_channels)
        }
    }

    /// The parameter-parity baseline: classic blocks everywhere, CBAM
    /// attention, 2 kernels per layer (its published default).
    pub fn baseline(in_channels: usize, out_channels: usize) -> Self {
        ModelConfig {
            kernels_per_layer: 2,
            attention: AttentionKind::Cbam,
            shuffled_convs: false,
            ..Self::ssa_unet(in_channels, out_channels)
        }
    }

    /// Desk-scale variant with widths 8..128 for fast tests and sweeps.
    pub fn tiny(in_channels: usize, out_channels: usize) -> Self {
        ModelConfig {
            widths: [8, 16, 32, 64, 128],
            shuffle_groups: [4, 4, 8, 8],
            sa_groups: [2, 2, 4, 8, 8],
            cbam_reduction: 4,
            ..Self::ssa_unet(in_channels, out_channels)
        }
    }

    /// Real channel widths per encoder level (bottleneck halved).
    pub fn real_widths(&self) -> [usize; 5] {
        let w = self.widths;
        [w[0], w[1], w[2], w[3], w[4] / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        if self.kernels_per_layer == 0 || self.decoder_kernels_per_layer == 0 {
            return Err(Error::config("kernels per layer must be >= 1"));
        }
        if self.widths[4] % 2 != 0 {
            return Err(Error::config(format!(
                "bottleneck width {} must be even (it runs at half width)",
                self.widths[4]
            )));
        }
        let f = self.real_widths();
        for (level, &c) in f.iter().enumerate() {
            match self.attention {
                AttentionKind::Shuffle => {
                    let g = self.sa_groups[level];
                    if g == 0 || c % (2 * g) != 0 {
                        return Err(Error::config(format!(
                            "level {}: width {c} not divisible by 2*sa_groups[{level}] = {}",
                            level + 1,
                            2 * g
                        )));
                    }
                }
                AttentionKind::Cbam => {
                    if self.cbam_reduction == 0 || c % self.cbam_reduction != 0 {
                        return Err(Error::config(format!(
                            "level {}: width {c} not divisible by CBAM reduction {}",
                            level + 1,
                            self.cbam_reduction
                        )));
                    }
                }
            }
        }
        if self.shuffled_convs {
            for level in 1..5 {
                let c_in = f[level - 1];
                let c_out = f[level];
                let g = self.shuffle_groups[level - 1];
                let mid = c_in * self.kernels_per_layer;
                if g == 0 || mid % g != 0 || c_out % g != 0 {
                    return Err(Error::config(format!(
                        "level {}: shuffled conv needs c_in*km ({mid}) and c_out ({c_out}) \
                         divisible by shuffle_groups[{}] = {g}",
                        level + 1,
                        level - 1
                    )));
                }
            }
        }
        for k in 1..=4 {
            let (c_in, _, _) = self.decoder_dims(k);
            if c_in % 2 != 0 {
                return Err(Error::config(format!(
                    "decoder level {k}: concatenated width {c_in} must be even"
                )));
            }
        }
        Ok(())
    }

    /// (in, mid, out) channel widths of decoder block `k` in 1..=4.
    fn decoder_dims(&self, k: usize) -> (usize, usize, usize) {
        let f = self.real_widths();
        let prev = match k {
            1 => f[4],
            _ => self.decoder_dims(k - 1).2,
        };
        let skip = f[4 - k];
        let c_in = prev + skip;
        let out = if k < 4 { f[3 - k] } else { f[0] };
        (c_in, c_in / 2, out)
    }
}

struct EncoderLevel {
    block: DoubleConvBlock,
    attention: Attention,
    scope: String,
    att_probe: String,
}

struct DecoderLevel {
    block: DoubleConvBlock,
    scope: String,
}

/// The assembled network. Immutable in eval mode (and safe to share
/// across threads there); training requires exclusive access.
pub struct SsaUnet<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    head: Conv2dLayer,
}

struct EncLevelCtx<T> {
    block: DoubleConvBlockCtx<T>,
    att: AttentionCtx<T>,
    pool: Option<MaxPoolCtx>,
}

struct DecLevelCtx<T> {
    pre_up_shape: Shape,
    up_channels: usize,
    block: DoubleConvBlockCtx<T>,
}

/// Saved activations of one forward pass, consumed by one backward pass.
pub struct ModelCtx<T> {
    enc: Vec<EncLevelCtx<T>>,
    dec: Vec<DecLevelCtx<T>>,
    head: Conv2dLayerCtx<T>,
}

impl<T: Scalar> SsaUnet<T> {
    /// Builds the network with seeded initialization; the parameter
    /// registry is populated with stable names such as
    /// `encoder.level3.conv1.depthwise.weight`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = config.real_widths();
        let km = config.kernels_per_layer;

        let mut encoder = Vec::with_capacity(5);
        for level in 0..5 {
            let scope = format!("encoder.level{}", level + 1);
            let c_in = if level == 0 {
                config.in_channels
            } else {
                f[level - 1]
            };
            let c_out = f[level];
            let block = if level == 0 || !config.shuffled_convs {
                DoubleConvBlock::new_classic(&mut ps, &mut rng, &scope, c_in, c_out, c_out, km)?
            } else {
                DoubleConvBlock::new_shuffled(
                    &mut ps,
                    &mut rng,
                    &scope,
                    c_in,
                    c_out,
                    c_out,
                    km,
                    config.shuffle_groups[level - 1],
                )?
            };
            let (attention, att_probe) = match config.attention {
                AttentionKind::Shuffle => (
                    Attention::Sa(ShuffleAttention::new(
                        &mut ps,
                        &format!("{scope}.sa"),
                        c_out,
                        config.sa_groups[level],
                    )?),
                    format!("{scope}.sa"),
                ),
                AttentionKind::Cbam => (
                    Attention::Cbam(Cbam::new(
                        &mut ps,
                        &mut rng,
                        &format!("{scope}.cbam"),
                        c_out,
                        config.cbam_reduction,
                    )?),
                    format!("{scope}.cbam"),
                ),
            };
            encoder.push(EncoderLevel {
                block,
                attention,
                scope,
                att_probe,
            });
        }

        let mut decoder = Vec::with_capacity(4);
        for k in 1..=4 {
            let scope = format!("decoder.level{k}");
            let (c_in, mid, c_out) = config.decoder_dims(k);
            let block = DoubleConvBlock::new_classic(
                &mut ps,
                &mut rng,
                &scope,
                c_in,
                mid,
                c_out,
                config.decoder_kernels_per_layer,
            )?;
            decoder.push(DecoderLevel { block, scope });
        }

        let head = Conv2dLayer::new(&mut ps, &mut rng, "out", f[0], config.out_channels, 1, 0, 1, true)?;
        Ok(SsaUnet {
            config,
            params: ps,
            encoder,
            decoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::dim(format!(
                "model takes {} input channels, got {}",
                self.config.in_channels, s.c
            )));
        }
        if s.h % 16 != 0 || s.w % 16 != 0 || s.h < 16 || s.w < 16 {
            return Err(Error::dim(format!(
                "spatial dims must be positive multiples of 16 for the 4 poolings, got ({}, {})",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Pure eval-mode forward using running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let ps = &self.params;
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(5);
        let mut cur = x.clone();
        for (level, enc) in self.encoder.iter().enumerate() {
            let b = enc.block.forward(ps, &cur)?;
            let a = enc.attention.forward(ps, &b)?;
            if level < 4 {
                let (p, _) = ops::max_pool_2x2(&a)?;
                cur = p;
            }
            skips.push(a);
        }
        let mut d = skips[4].clone();
        for (k, dec) in self.decoder.iter().enumerate() {
            let up = ops::bilinear_upsample_x2(&d)?;
            let cat = ops::concat_channels(&up, &skips[3 - k])?;
            d = dec.block.forward(ps, &cat)?;
        }
        self.head.forward(ps, &d)
    }

    /// Train-mode forward: computes with batch statistics, commits the
    /// running-stat updates, and returns the context for `backward`.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ModelCtx<T>)> {
        let (y, ctx, updates) = self.run_ctx(x, Mode::Train, None)?;
        for u in updates {
            *self.params.get_mut(u.id) = u.value;
        }
        Ok((y, ctx))
    }

    /// Eval-mode forward that captures the context and, when `probes` is
    /// given, the named layer activations (for Grad-CAM).
    pub fn forward_probe(
        &self,
        x: &Tensor<T>,
        probes: Option<&mut ProbeMap<T>>,
    ) -> Result<(Tensor<T>, ModelCtx<T>)> {
        let (y, ctx, _) = self.run_ctx(x, Mode::Eval, probes)?;
        Ok((y, ctx))
    }

    fn run_ctx(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        mut probes: Option<&mut ProbeMap<T>>,
    ) -> Result<(Tensor<T>, ModelCtx<T>, Vec<StatUpdate<T>>)> {
        self.check_input(x)?;
        let ps = &self.params;
        let mut updates = Vec::new();
        let mut enc_ctx = Vec::with_capacity(5);
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(5);
        let mut cur = x.clone();
        for (level, enc) in self.encoder.iter().enumerate() {
            let (b, bctx) =
                enc.block
                    .forward_ctx(ps, &cur, mode, &mut updates, probes.as_deref_mut())?;
            if let Some(p) = probes.as_deref_mut() {
                p.insert(format!("{}.block", enc.scope), b.clone());
            }
            let (a, actx) = enc.attention.forward_ctx(ps, &b)?;
            if let Some(p) = probes.as_deref_mut() {
                p.insert(enc.att_probe.clone(), a.clone());
            }
            let pool = if level < 4 {
                let (pooled, pctx) = ops::max_pool_2x2(&a)?;
                cur = pooled;
                Some(pctx)
            } else {
                None
            };
            enc_ctx.push(EncLevelCtx {
                block: bctx,
                att: actx,
                pool,
            });
            skips.push(a);
        }

        let mut dec_ctx = Vec::with_capacity(4);
        let mut d = skips[4].clone();
        for (k, dec) in self.decoder.iter().enumerate() {
            let pre_up_shape = d.shape();
            let up = ops::bilinear_upsample_x2(&d)?;
            let up_channels = up.shape().c;
            let cat = ops::concat_channels(&up, &skips[3 - k])?;
            let (out, bctx) =
                dec.block
                    .forward_ctx(ps, &cat, mode, &mut updates, probes.as_deref_mut())?;
            if let Some(p) = probes.as_deref_mut() {
                p.insert(format!("{}.block", dec.scope), out.clone());
            }
            dec_ctx.push(DecLevelCtx {
                pre_up_shape,
                up_channels,
                block: bctx,
            });
            d = out;
        }
        let (y, head_ctx) = self.head.forward_ctx(ps, &d)?;
        Ok((
            y,
            ModelCtx {
                enc: enc_ctx,
                dec: dec_ctx,
                head: head_ctx,
            },
            updates,
        ))
    }

    /// Backpropagates `grad_out` through the saved context, accumulating
    /// parameter gradients; returns the gradient at the input. When
    /// `probes` is given, the gradients flowing through the named layers
    /// are captured.
    pub fn backward(
        &self,
        ctx: ModelCtx<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
        mut probes: Option<&mut ProbeMap<T>>,
    ) -> Result<Tensor<T>> {
        let ps = &self.params;
        let ModelCtx { enc, dec, head } = ctx;
        let mut g = self.head.backward(ps, head, grad_out, grads)?;

        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None, None, None, None];
        for (k, (dec_level, dctx)) in self.decoder.iter().zip(dec).enumerate().rev() {
            if let Some(p) = probes.as_deref_mut() {
                p.insert(format!("{}.block", dec_level.scope), g.clone());
            }
            let g_cat =
                dec_level
                    .block
                    .backward(ps, dctx.block, &g, grads, probes.as_deref_mut())?;
            let (g_up, g_skip) = ops::concat_channels_backward(&g_cat, dctx.up_channels)?;
            skip_grads[3 - k] = Some(g_skip);
            g = ops::bilinear_upsample_x2_backward(dctx.pre_up_shape, &g_up);
        }

        // g now holds the gradient at the bottleneck attention output
        for (level, (enc_level, ectx)) in self.encoder.iter().zip(enc).enumerate().rev() {
            let g_att = match ectx.pool {
                Some(ref pctx) => {
                    let mut from_pool = ops::max_pool_2x2_backward(pctx, &g);
                    if let Some(gs) = skip_grads[level].take() {
                        from_pool.add_assign(&gs)?;
                    }
                    from_pool
                }
                None => g,
            };
            if let Some(p) = probes.as_deref_mut() {
                p.insert(enc_level.att_probe.clone(), g_att.clone());
            }
            let g_block = enc_level
                .attention
                .backward(ps, ectx.att, &g_att, grads)?;
            if let Some(p) = probes.as_deref_mut() {
                p.insert(format!("{}.block", enc_level.scope), g_block.clone());
            }
            g = enc_level
                .block
                .backward(ps, ectx.block, &g_block, grads, probes.as_deref_mut())?;
        }
        Ok(g)
    }

    /// Probe-capable layer names, in encoder-to-decoder order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for enc in &self.encoder {
            names.push(format!("{}.block", enc.scope));
            names.push(format!("{}.conv1", enc.scope));
            names.push(format!("{}.conv2", enc.scope));
            names.push(enc.att_probe.clone());
        }
        for dec in &self.decoder {
            names.push(format!("{}.block", dec.scope));
        }
        names
    }
}

/// Target-shaped tensor repeating the last input frame for every horizon.
pub fn persistence_predict<T: Scalar>(window: &SampleWindow<T>) -> Tensor<T> {
    let is = window.inputs.shape();
    let ts = window.targets.shape();
    let mut out = Tensor::zeros(ts);
    let last = window.inputs.plane(0, is.c - 1);
    for t in 0..ts.c {
        out.plane_mut(0, t).copy_from_slice(last);
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoint format "SSAC v1": magic "SSAC", u8 version, u32-length-prefixed
// UTF-8 key=value block, u32 tensor count, repeated (u32-length-prefixed
// name, RTEN blob); optimizer state appended in the same name-blob scheme
// with suffix keys; little-endian throughout.
// ---------------------------------------------------------------------------

const SSAC_MAGIC: &[u8; 4] = b"SSAC";
const SSAC_VERSION: u8 = 1;

/// Non-architectural metadata carried by a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_val_loss: f64,
    /// Normalization constant of the training set.
    pub norm_max: f64,
}

/// Optimizer state in checkpoint form: tensors named by parameter with a
/// suffix key (`<param>.m`, `<param>.v`).
pub struct OptimSnapshot<T> {
    pub step: u64,
    pub lr: f64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn config_block(config: &ModelConfig, meta: &CheckpointMeta, optim: Option<&OptimSnapshot<impl Scalar>>) -> String {
    let mut s = String::new();
    let join = |vals: &[usize]| {
        vals.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    s.push_str(&format!("in_channels={}\n", config.in_channels));
    s.push_str(&format!("out_channels={}\n", config.out_channels));
    s.push_str(&format!("kernels_per_layer={}\n", config.kernels_per_layer));
    s.push_str(&format!(
        "decoder_kernels_per_layer={}\n",
        config.decoder_kernels_per_layer
    ));
    s.push_str(&format!("widths={}\n", join(&config.widths)));
    s.push_str(&format!("shuffle_groups={}\n", join(&config.shuffle_groups)));
    s.push_str(&format!("sa_groups={}\n", join(&config.sa_groups)));
    s.push_str(&format!("attention={}\n", config.attention.as_str()));
    s.push_str(&format!("shuffled_convs={}\n", config.shuffled_convs));
    s.push_str(&format!("cbam_reduction={}\n", config.cbam_reduction));
    s.push_str(&format!("seed={}\n", config.seed));
    s.push_str(&format!("epoch={}\n", meta.epoch));
    s.push_str(&format!("best_val_loss_bits={}\n", meta.best_val_loss.to_bits()));
    s.push_str(&format!("best_val_loss={:e}\n", meta.best_val_loss));
    s.push_str(&format!("norm_max_bits={}\n", meta.norm_max.to_bits()));
    s.push_str(&format!("norm_max={:e}\n", meta.norm_max));
    if let Some(o) = optim {
        s.push_str(&format!("optim.step={}\n", o.step));
        s.push_str(&format!("optim.lr_bits={}\n", o.lr.to_bits()));
    }
    s
}

fn parse_config_block(block: &str) -> Result<(ModelConfig, CheckpointMeta, Option<(u64, f64)>)> {
    let mut map = std::collections::BTreeMap::new();
    for line in block.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::data(format!("checkpoint config block missing key \"{k}\"")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::data(format!("checkpoint key \"{k}\" is not an integer")))
    };
    let list_of = |k: &str, n: usize| -> Result<Vec<usize>> {
        let vals: Vec<usize> = get(k)?
            .split(',')
            .map(|p| p.parse().map_err(|_| Error::data(format!("bad list in key \"{k}\""))))
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(Error::data(format!(
                "key \"{k}\" must list {n} values, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    let f64_bits = |k: &str| -> Result<f64> {
        Ok(f64::from_bits(get(k)?.parse::<u64>().map_err(|_| {
            Error::data(format!("checkpoint key \"{k}\" is not a bit pattern"))
        })?))
    };
    let widths: [usize; 5] = list_of("widths", 5)?.try_into().unwrap();
    let shuffle_groups: [usize; 4] = list_of("shuffle_groups", 4)?.try_into().unwrap();
    let sa_groups: [usize; 5] = list_of("sa_groups", 5)?.try_into().unwrap();
    let config = ModelConfig {
        in_channels: usize_of("in_channels")?,
        out_channels: usize_of("out_channels")?,
        kernels_per_layer: usize_of("kernels_per_layer")?,
        decoder_kernels_per_layer: usize_of("decoder_kernels_per_layer")?,
        widths,
        shuffle_groups,
        sa_groups,
        attention: AttentionKind::parse(get("attention")?)?,
        shuffled_convs: get("shuffled_convs")? == "true",
        cbam_reduction: usize_of("cbam_reduction")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::data("checkpoint seed is not an integer"))?,
    };
    let meta = CheckpointMeta {
        epoch: usize_of("epoch")?,
        best_val_loss: f64_bits("best_val_loss_bits")?,
        norm_max: f64_bits("norm_max_bits")?,
    };
    let optim = if map.contains_key("optim.step") {
        Some((
            get("optim.step")?
                .parse()
                .map_err(|_| Error::data("optim.step is not an integer"))?,
            f64_bits("optim.lr_bits")?,
        ))
    } else {
        None
    };
    Ok((config, meta, optim))
}

fn write_named_tensor<T: Scalar, W: Write>(
    out: &mut W,
    name: &str,
    tensor: &Tensor<T>,
) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    tensor.write_rten(out)?;
    Ok(())
}

fn read_named_tensor<T: Scalar, R: Read>(
    input: &mut R,
    offset: &mut u64,
) -> Result<(String, Tensor<T>)> {
    let mut len_raw = [0u8; 4];
    read_exact(input, &mut len_raw, *offset)?;
    *offset += 4;
    let len = u32::from_le_bytes(len_raw) as usize;
    let mut name_raw = vec![0u8; len];
    read_exact(input, &mut name_raw, *offset)?;
    *offset += len as u64;
    let name = String::from_utf8(name_raw).map_err(|_| Error::Parse {
        offset: *offset,
        message: "tensor name is not UTF-8".into(),
    })?;
    let tensor: Tensor<T> = Tensor::read_rten(input, *offset)?;
    *offset += tensor.rten_len();
    Ok((name, tensor))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    crate::tensor::read_exact_at(input, buf, offset)
}

/// Writes model parameters, optimizer state and metadata. For `f32`
/// models the round trip is bit-exact.
pub fn save_checkpoint<T: Scalar>(
    model: &SsaUnet<T>,
    optim: Option<&OptimSnapshot<T>>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(SSAC_MAGIC)?;
    out.write_all(&[SSAC_VERSION])?;
    let block = config_block(&model.config, meta, optim);
    out.write_all(&(block.len() as u32).to_le_bytes())?;
    out.write_all(block.as_bytes())?;

    out.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for id in model.params.ids() {
        write_named_tensor(&mut out, model.params.name(id), model.params.get(id))?;
    }
    match optim {
        Some(o) => {
            out.write_all(&(o.tensors.len() as u32).to_le_bytes())?;
            for (name, t) in &o.tensors {
                write_named_tensor(&mut out, name, t)?;
            }
        }
        None => out.write_all(&0u32.to_le_bytes())?,
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds the model from the embedded config and loads every tensor,
/// rejecting unknown names, shape mismatches and partial coverage.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(SsaUnet<T>, Option<OptimSnapshot<T>>, CheckpointMeta)> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    let mut header = [0u8; 9];
    read_exact(&mut input, &mut header, 0)?;
    if &header[0..4] != SSAC_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad SSAC magic {:?}", &header[0..4]),
        });
    }
    if header[4] != SSAC_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported SSAC version {}", header[4]),
        });
    }
    let block_len = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let mut block_raw = vec![0u8; block_len];
    let mut offset = 9u64;
    read_exact(&mut input, &mut block_raw, offset)?;
    offset += block_len as u64;
    let block = String::from_utf8(block_raw).map_err(|_| Error::Parse {
        offset: 9,
        message: "config block is not UTF-8".into(),
    })?;
    let (config, meta, optim_meta) = parse_config_block(&block)?;
    let mut model: SsaUnet<T> = SsaUnet::build(config)?;

    let mut count_raw = [0u8; 4];
    read_exact(&mut input, &mut count_raw, offset)?;
    offset += 4;
    let count = u32::from_le_bytes(count_raw) as usize;
    if count != model.params.len() {
        return Err(Error::data(format!(
            "checkpoint stores {count} tensors, model registers {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let (name, tensor): (String, Tensor<T>) = read_named_tensor(&mut input, &mut offset)?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::data(format!("unknown parameter name \"{name}\"")))?;
        if seen[id.index()] {
            return Err(Error::data(format!("duplicate parameter \"{name}\"")));
        }
        seen[id.index()] = true;
        model.params.set_by_name(&name, tensor)?;
    }

    read_exact(&mut input, &mut count_raw, offset)?;
    offset += 4;
    let opt_count = u32::from_le_bytes(count_raw) as usize;
    let optim = if opt_count > 0 {
        let (step, lr) = optim_meta.ok_or_else(|| {
            Error::data("optimizer tensors present but optim.step/lr keys missing")
        })?;
        let mut tensors = Vec::with_capacity(opt_count);
        for _ in 0..opt_count {
            tensors.push(read_named_tensor(&mut input, &mut offset)?);
        }
        Some(OptimSnapshot { step, lr, tensors })
    } else {
        None
    };
    Ok((model, optim, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_parameter_counts() {
        let ssa = SsaUnet::<f32>::build(ModelConfig::ssa_unet(12, 12)).unwrap();
        assert_eq!(ssa.param_count(), 3_768_036);
        let reduced = SsaUnet::<f32>::build(ModelConfig::ssa_unet_reduced(12, 12)).unwrap();
        assert_eq!(reduced.param_count(), 3_117_676);
        let base = SsaUnet::<f32>::build(ModelConfig::baseline(12, 12)).unwrap();
        assert_eq!(base.param_count(), 4_034_247);
    }

    #[test]
    fn tiny_model_forward_shape_and_finiteness() {
        let mut config = ModelConfig::tiny(12, 6);
        config.seed = 3;
        let model = SsaUnet::<f32>::build(config).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(2, 12, 32, 32).unwrap());
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape().dims(), [2, 6, 32, 32]);
        assert!(!y.has_non_finite());
    }

    #[test]
    fn indivisible_spatial_dims_error_before_compute() {
        let model = SsaUnet::<f32>::build(ModelConfig::tiny(12, 6)).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 12, 40, 32).unwrap());
        let err = model.forward(&x).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = SsaUnet::<f32>::build(ModelConfig::tiny(12, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::rand_uniform(Shape::new(1, 12, 32, 32).unwrap(), 0.0, 1.0, &mut rng);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn persistence_repeats_last_input_frame() {
        let mut inputs = Tensor::<f64>::zeros(Shape::new(1, 12, 4, 4).unwrap());
        for c in 0..12 {
            inputs.plane_mut(0, c).fill(c as f64);
        }
        let window = SampleWindow {
            inputs,
            targets: Tensor::zeros(Shape::new(1, 6, 4, 4).unwrap()),
            offsets: (1..=6).collect(),
            interval_min: 5,
        };
        let pred = persistence_predict(&window);
        for t in 0..6 {
            assert!(pred.plane(0, t).iter().all(|&v| v == 11.0));
        }
    }

    #[test]
    fn invalid_config_names_the_constraint() {
        let mut config = ModelConfig::tiny(12, 6);
        config.sa_groups = [64, 64, 64, 64, 64];
        match SsaUnet::<f32>::build(config) {
            Err(err) => assert!(err.to_string().contains("sa_groups"), "{err}"),
            Ok(_) => panic!("invalid config must not build"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssac");
        let mut config = ModelConfig::tiny(12, 6);
        config.seed = 11;
        let model = SsaUnet::<f32>::build(config).unwrap();
        let meta = CheckpointMeta {
            epoch: 7,
            best_val_loss: 0.012345,
            norm_max: 3.25,
        };
        save_checkpoint(&model, None, &meta, &path).unwrap();
        let (loaded, optim, meta2) = load_checkpoint::<f32>(&path).unwrap();
        assert!(optim.is_none());
        assert_eq!(meta2, meta);
        assert_eq!(loaded.config, model.config);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::rand_uniform(Shape::new(1, 12, 32, 32).unwrap(), 0.0, 1.0, &mut rng);
        let a = model.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(a, b, "forward after round trip must be bit-identical");
    }

    #[test]
    fn corrupted_magic_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssac");
        let model = SsaUnet::<f32>::build(ModelConfig::tiny(12, 6)).unwrap();
        let meta = CheckpointMeta {
            epoch: 0,
            best_val_loss: 1.0,
            norm_max: 1.0,
        };
        save_checkpoint(&model, None, &meta, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Parse { offset: 0, .. }) => {}
            Err(other) => panic!("expected magic parse error, got {other}"),
            Ok(_) => panic!("corrupted magic must not load"),
        }
    }

    #[test]
    fn km_mismatch_is_rejected_by_tensor_count_or_shape() {
        // Save a km=3 tiny model, then rewrite its config block to km=2:
        // the rebuilt model expects different shapes and must refuse.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssac");
        let model = SsaUnet::<f32>::build(ModelConfig::tiny(12, 6)).unwrap();
        let meta = CheckpointMeta {
            epoch: 0,
            best_val_loss: 1.0,
            norm_max: 1.0,
        };
        save_checkpoint(&model, None, &meta, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let block_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let block = String::from_utf8(bytes[9..9 + block_len].to_vec()).unwrap();
        let patched = block.replace("kernels_per_layer=3", "kernels_per_layer=2");
        assert_eq!(patched.len(), block.len());
        let mut out = bytes.clone();
        out[9..9 + block_len].copy_from_slice(patched.as_bytes());
        std::fs::write(&path, &out).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(err) => {
                let msg = err.to_string();
                assert!(
                    msg.contains("shape") || msg.contains("depthwise"),
                    "error should name the offending tensor: {msg}"
                );
            }
            Ok(_) => panic!("km mismatch must not load"),
        }
    }

    #[test]
    fn encoder_spatial_sizes_follow_the_halving_ladder() {
        // probe activations give direct access to per-level shapes
        let model = SsaUnet::<f64>::build(ModelConfig::tiny(12, 6)).unwrap();
        let x = Tensor::<f64>::zeros(Shape::new(1, 12, 32, 32).unwrap());
        let mut probes = ProbeMap::new();
        model.forward_probe(&x, Some(&mut probes)).unwrap();
        for (level, want) in [(1usize, 32usize), (2, 16), (3, 8), (4, 4), (5, 2)] {
            let t = &probes[&format!("encoder.level{level}.block")];
            assert_eq!(t.shape().h, want, "level {level}");
        }
        assert_eq!(probes["decoder.level4.block"].shape().h, 32);
    }
}
