//! Omnidirectional super-resolution building blocks: ERP geometry,
//! spherically weighted metrics, differentiable network blocks with
//! hand-written adjoints, model assembly and checkpointing, toy-scale
//! training, and the two-stage inference pipeline.

pub mod bicubic;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod erp;
pub mod error;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tape;
pub mod train;

pub use error::{OpdnError, Result};
pub use image::ErpImage;
