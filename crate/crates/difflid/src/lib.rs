//! A desk-scale laboratory for two connected questions: what a denoising
//! diffusion model's bottleneck features encode at different timesteps, and
//! whether those features can guide a dehazing network.
//!
//! Everything runs on CPU with deterministic seeds. The crate ships a small
//! tape-based autodiff engine, a toy denoising diffusion model over
//! procedural scenes, probes and separation scores for bottleneck features,
//! and a restoration network that consumes those features through
//! cross-attention and feature modulation.

/// Arithmetic element type. The default build uses f64 so gradient checks
/// and tolerance-based tests are meaningful; the `f32` feature switches all
/// arithmetic to f32 for faster training runs.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub mod config;
pub mod dehaze;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod hazegen;
pub mod hspace;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
