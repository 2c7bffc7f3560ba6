//! Command-line workflows over the segmentation core: dataset preparation,
//! training, evaluation, ablation sweeps, few-shot sweeps, and mask export.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
