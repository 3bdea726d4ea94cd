//! Interleaved correspondence matching and latent diffusion sampling.
//!
//! The sampler alternates one cross-domain rewarp of the exemplar with one
//! deterministic denoising step, gated by a cycle-consistency mask. Noise
//! predictors are analytic oracles for Gaussian and mixture priors, so the
//! whole pipeline is verifiable without trained networks.

pub mod denoise;
pub mod error;
pub mod grid;
pub mod losses;
pub mod matching;
pub mod midm;
pub mod registry;
pub mod rng;
pub mod schedule;

pub use error::{MidmError, Result};
pub use grid::{FeatureGrid, LatentGrid, Position, RgbImage};
pub use rng::Rng;
