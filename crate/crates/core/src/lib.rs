//! Spiking denoising diffusion engine.
//!
//! A spiking U-Net built from leaky integrate-and-fire neurons serves as the
//! noise predictor of a DDPM. Everything, including the backward passes, is
//! written by hand over dense CPU tensors.

pub mod data;
pub mod diffusion;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod lif;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Scalar, Tensor};
