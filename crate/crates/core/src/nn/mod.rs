//! The CNN op set shared by every decodable architecture. Each op has a
//! forward pass and an exact reverse-mode gradient. Feature maps are rank-3
//! `(C, H, W)` tensors.

mod conv;
mod ops;

pub use conv::{conv_backward, conv_forward, conv_macs, ConvGrads, ConvLayer};
pub(crate) use conv::conv_backward_impl;
pub use ops::{
    concat_channels, instance_norm, instance_norm_backward, maxpool2, relu, relu_backward,
    resize_nearest, resize_nearest_backward, split_channels, sum_maps, unpool, unpool_values,
    upsample_nearest, upsample_nearest_backward, PoolRecord, INSTANCE_NORM_EPS,
};
