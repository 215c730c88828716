//! Conditional latent diffusion for interpolating missing slices in sparse
//! cardiac short-axis stacks.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod interpolator;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod phantom;
pub mod plot;
pub mod tensor;
pub mod train;
pub mod vae;
pub mod volume;
pub use error::{Error, Result};
