pub mod alignment;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod recon;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod schedule;
pub mod seed;
pub mod views;

pub use error::{Error, Result};
