pub mod audio;
pub mod branches;
pub mod clipio;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod config;
pub mod geometry;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod pose;
