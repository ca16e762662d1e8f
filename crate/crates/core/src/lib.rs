//! Token perturbation guidance laboratory.

pub mod analysis;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod perturb;
pub mod rng;

pub use error::{Error, Result};
