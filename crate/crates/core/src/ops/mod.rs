//! Forward and backward kernels. Backward functions take the forward inputs
//! (or a cache) and the output gradient, and return input/parameter gradients.

pub mod activation;
pub mod conv;
pub mod gemm;
pub mod layout;
pub mod linear;
pub mod norm;

pub use activation::{silu, silu_backward};
pub use conv::{conv2d, conv2d_backward, Conv2dGrads, ConvGeometry};
pub use layout::{
    add_channel_bias_fused, channel_bias_fused_backward, concat_channels, mean_time,
    mean_time_backward, replicate_time, split_channels, sum_time, upsample_nearest2x,
    upsample_nearest2x_backward,
};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache, BatchNormGrads, BN_EPS};
