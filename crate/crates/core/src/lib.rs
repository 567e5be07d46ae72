//! Relation-consistency learning for cross-modal retrieval with noisy
//! image-text correspondences.
//!
//! The pipeline warms a pair of linear encoders up with a triplet loss, then
//! each epoch splits the training pairs into clean, locally associated and
//! noisy partitions (two-component GMM on per-pair InfoNCE losses, refined by
//! an intra-modal relation discrepancy) and trains each partition with its
//! own objective.

pub mod batch;
pub mod config;
pub mod data;
pub mod division;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
