//! Neural network primitives. Each is available as a pure function over
//! [`Tensor`](crate::Tensor)s and as a differentiable [`Graph`](crate::Graph)
//! operation.

mod activation;
mod conv;
mod norm;
mod resample;

pub use activation::{relu, softmax_channels};
pub use conv::{
    conv2d, depthwise_conv2d, depthwise_separable_conv2d, pointwise_conv2d, ConvGeometry, ConvParams,
};
pub use norm::{batchnorm2d, update_running_stats, BatchNormState, BatchStats, BnMode, BN_EPS, BN_MOMENTUM};
pub use resample::{avgpool2d, bilinear_upsample2x};
