//! Conditional flow matching surrogates for (partially observed) dynamical
//! systems, with few-step samplers obtained by direct distillation,
//! progressive distillation, adversarial distillation and rectification.

pub mod cli;
pub mod distill;
pub mod dynsys;
pub mod error;
mod fft;
pub mod metrics;
pub mod flowmatch;
pub mod nn;
pub mod odesolve;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Random number generator used everywhere; seeded runs are bit-reproducible.
pub type FlowRng = rand_chacha::ChaCha8Rng;

/// Seeded generator.
pub fn rng_from_seed(seed: u64) -> FlowRng {
    <FlowRng as rand::SeedableRng>::seed_from_u64(seed)
}
