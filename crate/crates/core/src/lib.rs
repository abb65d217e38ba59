//! Instance-wise context routing with a co-evolving strategy catalog.
//!
//! A small neural collaborative-filtering model learns which composite context
//! strategy (instruction, demos, reasoning format, output constraints) works
//! for which input, and a gradient-guided search over strategy embeddings
//! proposes new strategies for the inputs nothing in the catalog solves.

pub mod adapters;
pub mod catalog;
pub mod clustering;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evolution;
pub mod linalg;
pub mod model;
pub mod orchestrator;
pub mod routing;
pub mod seed;
pub mod simulate;
pub mod transport;

pub use error::{Error, Result};
