//! Differentiable layer primitives. Each forward kernel has a matching
//! backward kernel taking whatever the forward pass cached.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod resample;

pub use activation::{relu, relu6, sigmoid, softmax_channels};
pub use conv::{conv2d, depthwise_conv2d, output_extent, Padding};
pub use dense::{channel_scale, dense};
pub use norm::{batchnorm_infer, batchnorm_train, BatchNormParams, Mode, BN_EPSILON, BN_MOMENTUM};
pub use resample::bilinear_upsample2x;
