//! Prompt-free multi-domain nuclei segmentation.
//!
//! A frozen ViT-style backbone is adapted per nuclei domain through low-rank
//! bypass adapters, a multi-scale self-prompt head replaces manual point/box
//! prompts, and a domain-query decoder produces the mask. Training runs
//! sequentially over domains with the common adapter half inherited across
//! domain boundaries. Everything is deterministic given a seed.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod spgen;
pub mod tape;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
