//! Cross-modal image translation core.
//!
//! A self-contained tensor/autodiff engine plus the three generative
//! architectures built on it — a U-Net conditional GAN, a dual-generator
//! cycle-consistent GAN, and a convolutional VAE — together with their
//! training loops, image quality metrics (MSE / PSNR / SSIM), a seeded
//! procedural phantom-pair generator, and a binary checkpoint codec.
//!
//! The crate is `no_std` + `alloc`: everything operates on plain heap
//! buffers and a caller-supplied deterministic [`rng::Rng`]. File formats,
//! PNG handling and the command-line surface live in the companion CLI
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, TensorError};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tape::{Activation, NodeId, Tape};
pub use tensor::Tensor;
