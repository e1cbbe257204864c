//! Cognitive super-resolution at desk scale.
//!
//! The crate implements the conditioning machinery of a cognition-aware
//! diffusion super-resolution model: a query-based cognitive adapter that
//! turns LR image tokens into a multi-token embedding, reference-image
//! generation from that embedding, a shared ControlNet-style control encoder
//! and a denoising U-Net whose middle and decoder attention blocks are
//! All-in-Attention modules. Pre-trained components are replaced by small
//! deterministic stand-ins so every mechanism can be trained and checked on
//! a CPU.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod degradation;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod preprocessor;
pub mod reference;
pub mod toy;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
