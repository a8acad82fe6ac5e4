//! Lifelong model editing with a vector-assisted mixture-of-experts
//! adapter over a frozen toy base model.
//!
//! The adapter attaches after one block of the frozen model. A router
//! embeds each query sentence, searches K shards of stored edit
//! embeddings, and gates the experts whose shards score above a threshold;
//! gated experts calibrate the block output while everything else passes
//! through untouched. The harness streams edits, trains experts, and
//! scores Reliability, Generality, and Locality over the stream.

pub mod adapter;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod model;
pub mod router;
pub mod synth;
pub mod vector_store;

pub use error::{Error, Result};
