//! Desk-scale binary segmentation with a ViT encoder carrying bottleneck
//! adapters and frequency-domain prompt generation, a prompt-free two-way
//! attention mask decoder, and the data/training/metric machinery needed to
//! run ablation and few-shot experiments end to end on CPU.

pub mod data;
pub mod decoder;
pub mod error;
pub mod freq;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
