//! Generative beam search: synthetic sites, angular latents, a conditional
//! diffusion denoiser and the evaluation harness around it.

pub mod beams;
pub mod brainstorm;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod par;
pub mod rng;
pub mod sitegen;
pub mod training;

pub use error::{Error, Result};
