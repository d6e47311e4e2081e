//! Streaming vision-transformer engine with a persistent KV-cache.

pub mod attention;
pub mod backbone;
pub mod engine;
pub mod error;
pub mod heads;
pub mod losses;
pub mod numerics;
pub mod params;
pub mod rope3d;
pub mod tokenizer;

pub use error::{CheckpointError, Error, Result};
pub use numerics::{Scalar, Tensor};
