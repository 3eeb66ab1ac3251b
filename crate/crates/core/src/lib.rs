//! Geometric multi-hop mixture-of-experts language modeling at desk scale.
//!
//! The crate bundles a minimal reverse-mode tensor kernel, cosine-centroid
//! routing with its variant spectrum (linear, hash, random-fixed, top-1),
//! multi-hop expert layers with relative-norm halting, a deterministic
//! trainer, mechanistic probes, and a paired-bootstrap/TOST equivalence
//! harness over per-batch validation losses.

pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod layer;
pub mod model;
pub mod numkern;
pub mod probes;
pub mod routing;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
