//! Flow-matching collaborative filtering.
//!
//! The library learns a velocity field that transports user interaction
//! vectors from a behavior-guided Bernoulli prior to the observed binary
//! interaction matrix, then recommends by ranking the items a few Euler
//! steps of that field light up. Modules:
//!
//! - [`data`]: dataset loading, k-core filtering, per-user splits, bundles
//! - [`prior`]: behavior-guided prior over interaction vectors
//! - [`flowcore`]: time grid, mask interpolation, flow fields, state updates
//! - [`model`]: MLP predictor with step embeddings, Adam, checkpoints
//! - [`train`]: training loop with periodic validation
//! - [`infer`]: multi-step sampling and top-K recommendation
//! - [`eval`]: Recall@K / NDCG@K under the all-ranking protocol
//! - [`cli`]: command implementations backing the `flowcf` binary

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod flowcore;
pub mod infer;
pub mod model;
pub mod prior;
pub mod train;
pub mod util;

pub use error::{Error, Result};
