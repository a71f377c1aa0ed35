//! Addition-with-scratchpad laboratory: supervised pre-training of a small
//! transformer, actor-critic fine-tuning under a standard or certainty-weighted
//! KL penalty, and analysis of the tokens where the pre-trained policy hesitates.

pub mod a2c;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rlenv;
pub mod runner;
pub mod scratchpad;
pub mod seed;
pub mod token_analysis;

pub use error::{Error, Result};
