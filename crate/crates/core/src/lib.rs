pub mod adapter;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod forecaster;
pub mod fourier;
pub mod gradcheck;
pub mod nn;
pub mod ntf;
pub mod params;
pub mod pipeline;
pub mod pgm;
pub mod rendering;
pub mod sma;
pub mod spectral;

pub use error::{Error, Result};
