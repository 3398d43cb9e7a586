//! Denoising and analysis of XPCS two-time correlation functions.

pub mod autoenc;
pub mod corrsim;
pub mod denoiser;
pub mod error;
pub mod flow;
mod jsonf;
pub mod kww;
pub mod prep;
pub mod uncert;

pub use error::{Error, Result};
