//! Trainable layers and the architecture's composite blocks.

pub mod attention;
pub mod blocks;
pub mod layers;
pub mod params;

pub use attention::{Attention, AttentionCtx, Cbam, ShuffleAttention};
pub use blocks::{
    DepthwiseSeparableConv, DoubleConvBlock, ProbeMap, SepConv, ShuffledDepthwiseSeparableConv,
};
pub use layers::{BatchNorm2d, Conv2dLayer};
pub use params::{kaiming_uniform, Grads, ParamId, ParamKind, Params, StatUpdate};
