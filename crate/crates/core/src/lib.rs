//! Subgroup-targeted synthetic data augmentation for driving datasets.
//!
//! The pipeline finds under-represented environmental subgroups (weather ×
//! time of day) in a dataset, synthesizes mask-aligned images for them
//! through a pluggable generative backend, and evaluates the result with
//! Fréchet distance, segmentation metrics, and driving scores.

pub mod augment;
pub mod backend;
pub mod caption;
pub mod cli;
pub mod embeddings;
pub mod manifest;
pub mod metrics;
pub mod palette;
pub mod report;
pub mod rng;
pub mod subgroup;
