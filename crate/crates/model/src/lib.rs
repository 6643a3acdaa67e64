//! Latent text-to-audio model stack: 1D-VAE over mel channels, conditioning
//! assembly, the FIT denoiser, and linear-schedule diffusion training.

pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod fit;
pub mod optim;
pub mod params;
pub mod vae;

pub use error::{ModelError, Result};
