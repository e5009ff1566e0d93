pub mod autoencoder;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod edge;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod unet;

pub use error::{Error, Result};
