//! Object-centric scene embeddings extracted from the forward-pass trace of a
//! pre-trained vision transformer.
//!
//! The pipeline reads a [`trace::TraceBundle`] (per-layer attention matrices,
//! final-layer keys, CLS attention and the RGB frame), aggregates attentions
//! with rollout, removes recurring background, groups the remaining patch
//! tokens with spectral clustering and refines the groups into pixel masks.
//! Each group is pooled into a slot; slots are bound to a fixed reference order
//! and fed to a behavior-cloning policy.

pub mod atomic;
pub mod background;
pub mod baseline;
pub mod binding;
pub mod cluster;
pub mod config;
pub mod crf;
pub mod error;
pub mod fixtures;
pub mod kmeans;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod pnm;
pub mod policy;
pub mod rollout;
pub mod seed;
pub mod slots;
pub mod trace;

pub use error::{Error, Result};
