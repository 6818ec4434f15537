//! Multi-task controllable diffusion at desk scale.
//!
//! A single frozen pixel-space denoiser serves several condition-to-image
//! tasks. Each task's visual condition goes through its own adapter module
//! (hard-routed by task index), and a hypernet maps the task instruction to
//! per-channel scalings of the zero-initialised convolutions that bridge a
//! trainable encoder copy into the frozen network.

pub mod config;
pub mod control;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grad;
pub mod gradsuite;
pub mod params;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
