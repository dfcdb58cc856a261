//! Sequence-to-sequence text generation with a continuous diffusion model.
//!
//! Source and target are embedded into one latent sequence; training corrupts only the target
//! half and the denoiser learns to recover it while attending to the clean source. Sampling
//! runs the anchored reverse process from Gaussian noise and picks among candidates with
//! minimum Bayes risk decoding.

pub mod data;
pub mod decoding;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
