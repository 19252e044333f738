//! A self-contained diffusion-planning laboratory for offline RL.
//!
//! Everything runs on CPU with a built-in f64 autodiff engine: denoiser
//! backbones (MLP / 1-D U-Net / 1-D diffusion transformer), DDPM/DDIM
//! samplers with guided variants (classifier guidance, classifier-free
//! guidance, sample-and-select), toy continuous-control environments with
//! scripted data generators, and a sweep harness that ties them together.

pub mod dataset;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod nets;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
