//! Two-stage U-Net cascade for longitudinal bone-lesion risk mapping.
//!
//! A slice-level network segments bone; a patch-level network predicts,
//! inside the bone region, where lesions will appear at the next time
//! point. Patch predictions are fused back into a per-voxel risk volume.

pub mod cascade;
pub mod error;
pub mod eval;
pub mod nn;
pub mod patches;
pub mod phantom;
pub mod preprocess;
pub mod seed;
pub mod unet;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use nn::Tensor4;
pub use volume::{Geometry, MaskVolume, Slice2D, Volume};
pub use unet::{LossKind, UNet, UNetConfig, UNetModel};
