//! Files and command line for `segmap-core`: synthetic datasets on disk,
//! TOML configuration with overrides, safetensors checkpoints, JSON-lines
//! metric logs, BEV overlays, and the training/evaluation/ablation runners.

pub mod checkpoint;
pub mod cli;
pub mod config_file;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod overlay;
pub mod runner;

pub use error::{Error, Result};
