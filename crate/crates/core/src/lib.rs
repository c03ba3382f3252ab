//! Multi-modal click-through-rate prediction with expert fusion,
//! diffusion-style synergy capture and adaptive fusion, on a small
//! reverse-mode autodiff engine.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod experts;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
