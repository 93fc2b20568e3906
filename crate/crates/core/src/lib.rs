//! Task-specific knowledge distillation for small segmentation models.
//!
//! A large teacher is adapted to a segmentation task with low-rank adapters
//! and then distilled into a tiny ViT student at two levels: encoder hidden
//! states and decoder logits. Transfer images for distillation come from
//! geometric augmentation and a small denoising-diffusion generator.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod shapes;
pub mod trainer;

pub use error::{CoreError, Result};
