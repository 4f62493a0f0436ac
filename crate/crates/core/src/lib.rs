//! Joint entity and relation extraction over span graphs fused with a
//! background knowledge graph.
//!
//! The pipeline enumerates spans, scores an initial span graph, refines span
//! states with a bidirectional GCN over predicted relations, encodes a
//! per-document knowledge graph with a relational GCN, fuses the two through
//! sentinel attention and predicts the final span graph.

pub mod config;
pub mod corpus;
pub mod encoder;
mod error;
pub mod eval;
pub mod fusion;
pub mod kb;
pub mod kgnn;
pub mod model;
pub mod nn;
pub mod spangraph;
pub mod train;

pub use config::{ModelConfig, RelationLossMode, Variant};
pub use error::{KeciError, Result};
