//! Hierarchical urban graph embeddings for multi-resolution commuting flow
//! prediction.
//!
//! The library builds a typed directed graph over mesh grids and cities
//! (flow, inclusion, and optional adjacency edges), trains a multi-head
//! relation-aware attention encoder with per-task decoders for grid-grid and
//! grid-city flow regression, ships a learned gravity baseline, and explains
//! trained predictions through integrated gradients over grid indicators and
//! edge masks. A seeded synthetic world generator provides end-to-end
//! verifiable data.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod explain;
pub mod graph;
pub mod gravity;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
