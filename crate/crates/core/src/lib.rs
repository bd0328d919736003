//! Bayesian non-negative reward modelling at desk scale.
//!
//! Rewards are built from sparse non-negative latent factors:
//! `r = θᵀΦ + relu(b)`, with a per-response Weibull posterior over `θ`
//! (amortized through an inference network) and a global Weibull posterior
//! over the dictionary `Φ`, trained against Gamma priors under a
//! Bradley–Terry preference likelihood.

pub mod checkpoint;
pub mod datagen;
pub mod diffcore;
pub mod distributions;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod trainer;
