//! Numerical kernels: each differentiable operation comes as a forward
//! function plus a backward that consumes the forward's saved context.

pub mod activate;
pub mod concat;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod shuffle;

pub use activate::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{conv2d, conv2d_backward, conv2d_ctx, conv2d_grads, Conv2dCtx};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_eval, group_norm_per_channel,
    group_norm_per_channel_backward, BnCtx, BnStats, GnCtx, Mode,
};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward,
    max_pool_2x2, max_pool_2x2_backward, MaxPoolCtx,
};
pub use resize::{bilinear_upsample_x2, bilinear_upsample_x2_backward};
pub use shuffle::{channel_shuffle, channel_shuffle_backward, shuffle_index_map};
