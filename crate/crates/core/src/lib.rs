//! Visual goal-step inference engine.

pub mod aggregator;
pub mod corpus;
pub mod embed_store;
pub mod error;
pub mod evaluator;
pub mod keyframes;
pub mod models;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
