//! Sequence-to-sequence text generation with continuous embedding diffusion.
//!
//! An encoder-decoder transformer denoises embedding sequences conditioned on a
//! source sentence. Training uses self-conditioning and a noise schedule that
//! is learned separately for every output token position, re-fitted so that
//! the per-step denoising loss grows linearly with the diffusion step.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
