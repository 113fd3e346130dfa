//! Segmentation-guided vectorized map construction.
//!
//! Surround-view images pass through a shared convolutional backbone, are
//! lifted into a bird's-eye-view (BEV) grid, refined by a BEV segmentation
//! head whose features steer a cross-attention guidance block, and decoded by
//! a query-based vector map decoder. Two auxiliary segmentation heads (image
//! space and BEV space) are trained with a weighted Dice + cross-entropy loss
//! alongside the set-prediction map loss.
//!
//! The crate is `no_std` (with `alloc`); file formats, configuration files
//! and the command line live in the `segmap` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod backbone;
pub mod bev;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod feature;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod guidance;
pub mod kernels;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod scene;
pub mod suite;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
