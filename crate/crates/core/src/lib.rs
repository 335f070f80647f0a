//! Transformer translation with pool-based active learning.

pub mod acquisition;
pub mod active_loop;
pub mod bpe;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod text;
pub mod toy;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
