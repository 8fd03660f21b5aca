//! Latent-influence quantification for multi-latent generative models, and
//! contrastive training on views synthesized from them.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod mi;
pub mod monte_carlo;
pub mod nn;
pub mod plot;
pub mod probe;
pub mod rundir;
pub mod sampling;
pub mod seed;
pub mod sscrl;
pub mod views;

pub use error::{Error, Result};
