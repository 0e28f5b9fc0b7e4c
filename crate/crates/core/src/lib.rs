//! Hierarchical semantic graphs for text-driven motion synthesis.
//!
//! A motion description is parsed into a three-level graph (motion, action,
//! specific nodes), node embeddings are refined with relation-factorized graph
//! attention, and three chained latent diffusion models generate motion from
//! coarse to fine.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod embed;
pub mod graphreason;
pub mod metrics;
pub mod motionrep;
pub mod motionvae;
pub mod nn;
pub mod pipeline;
pub mod semgraph;
