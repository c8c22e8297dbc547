//! Desk-scale laboratory for adversarial purification through a consistency
//! generator: instead of denoising an attacked input directly, the defense
//! searches latent space for a population of generator inputs whose outputs
//! reconstruct the test sample while staying distributed like real latents,
//! then majority-votes a classifier over the generated population.
//!
//! Everything runs on plain `f64` CPU math. Randomness flows exclusively
//! through keyed counter-style streams so every experiment replays
//! bit-identically regardless of worker count.

pub mod attack;
pub mod classifier;
pub mod cm;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod purify;
pub mod quadrature;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;
