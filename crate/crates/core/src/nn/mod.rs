//! Model architectures: layers, the U-Net generator, the patch
//! discriminator, the convolutional VAE, and the bundle type that ties a
//! trained model to its configuration.

pub mod bundle;
pub mod layers;
pub mod patchgan;
pub mod unet;
pub mod vae;

pub use bundle::{ModelBundle, ModelKind};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Fwd, Linear, Module};
pub use patchgan::{PatchGan, PatchGanConfig};
pub use unet::{UNetConfig, UNetGenerator};
pub use vae::{Vae, VaeConfig};
