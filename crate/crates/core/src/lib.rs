//! Slice-wise aortic aneurysm segmentation: a hand-differentiated U-Net,
//! training-set augmentation, 3D post-processing, surface reconstruction and
//! evaluation.
//!
//! The network stack is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient verification); concrete aliases live at the crate root.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
mod mc_tables;
pub mod optim;
pub mod postrecon;
pub mod scalar;
pub mod tensor;
pub mod unet;
pub mod volio;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvParams, Dims4, LayerGrad, Tensor4};
pub use unet::{UNetGrads, UNetParams, UNetSpec};

pub type Tensor = Tensor4<f32>;
pub type Tensor64 = Tensor4<f64>;
pub type Conv = ConvParams<f32>;
pub type UNet = UNetParams<f32>;
pub type UNet64 = UNetParams<f64>;
