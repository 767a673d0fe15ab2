//! Taxonomy completion with probabilistic box embeddings.
//!
//! Concepts of a seed taxonomy are decoded into axis-aligned boxes from their
//! embeddings and one-hop children; a new concept is decoded into a query box
//! and every candidate position `<parent, child>` (or `<parent, none>` for a
//! leaf attachment) is scored by box containment and center closeness.

pub mod autodiff;
pub mod boxes;
pub mod config;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;
pub mod taxonomy;
pub mod train;

pub use error::{Error, Result};
