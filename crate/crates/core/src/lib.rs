//! Spatial-attention generative adversarial network for thin-cloud removal
//! from single optical remote-sensing images.
//!
//! The crate is self-contained: tensors and their reverse-mode derivatives
//! live in [`numerics`], the generator/discriminator pair in
//! [`attention_net`], the training objective in [`losses`], PSNR/SSIM in
//! [`metrics`], paired data handling in [`data`] and the adversarial loop with
//! checkpointing in [`trainer`].

pub mod attention_net;
pub mod data;
mod error;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
