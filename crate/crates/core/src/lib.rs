//! Partial-order quadruplet ranking losses for cross-modal embeddings, with
//! max-margin, triplet, contrastive and transport-weighted baselines,
//! negative and partial mining, retrieval metrics and an experiment runner.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod numerics;
pub mod sinkhorn;
pub mod synthetic;

pub use error::{Error, Result};
