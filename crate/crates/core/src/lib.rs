//! Transition video generation between two given frames with a small latent
//! video diffusion model.

pub mod backbone;
pub mod bmp;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rar;
pub mod text;
pub mod training;
pub mod transition;

pub use error::{Error, Result};
