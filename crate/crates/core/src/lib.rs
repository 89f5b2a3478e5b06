//! Self-supervised denoising of ultrasound Doppler data from split-angle
//! plane-wave acquisitions, with the simulation, clutter filtering, Doppler
//! estimation, baselines and metrics around it.

pub mod autodiff;
pub mod baselines;
mod bytes;
pub mod denoiser;
pub mod doppler;
pub mod error;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
