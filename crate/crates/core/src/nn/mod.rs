//! Differentiable primitives for the segmentation networks.
//!
//! Every operation is a plain function with a matching `*_backward`
//! function; there is no autograd graph. Functions are generic over
//! [`Real`] so the same code runs in `f32` for training and in `f64` for
//! finite-difference gradient checks.

mod adam;
mod loss;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState, Param};
pub use loss::{bce_logit_grad, bce_loss, weighted_bce_loss, LOSS_EPS};
pub use ops::{
    concat_channels, concat_channels_backward, conv1x1, conv1x1_backward, conv2d, conv2d_backward,
    elu, elu_backward, max_pool2, max_pool2_backward, sigmoid, sigmoid_backward, upsample2,
    upsample2_backward, ConvGrads, PoolIndices,
};
pub use tensor::Tensor4;

use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type of tensors.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    fn from_f64c(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
