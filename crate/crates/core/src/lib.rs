//! Template-based training for 3D brain segmentation.
//!
//! A single labelled template is turned into an unlimited stream of training
//! pairs by [`augment`], a 3D U-Net ([`unet`]) is trained on that stream by
//! [`train`], and [`postprocess`] turns network output into a brain mask,
//! skull-stripped image, labels and probability maps.

pub mod augment;
pub mod error;
pub mod interp;
pub mod io;
pub mod phantom;
pub mod postprocess;
pub mod rng;
pub mod segment;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use unet::{UNet, UNetConfig, UNetModel};
pub use volume::{ErrorSplit, LabelVolume, Volume};
