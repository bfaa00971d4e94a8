//! Convolution-free transformer-GAN for single-image super-resolution.
//!
//! The generator turns a low-resolution image into a 2x super-resolved
//! one through four patch-translator stages (patch split -> modulated
//! transformer stack -> patch merge) wired with bilinear rescaling and
//! skip connections; the same trained parameters applied twice give 4x.
//! A ViT-style discriminator scores candidate images conditioned on the
//! upsampled input. Everything is f64 on the CPU with a tape-based
//! autodiff engine, so analytic gradients can be (and are) verified
//! against central finite differences.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patch_ops;
pub mod patch_translator;
pub mod resample;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use tensor::Tensor;
