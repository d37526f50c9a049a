//! Benchmark harness for dense passage retrieval.
//!
//! The pipeline chunks documents, embeds chunks through a cached
//! [`embedding::Embedder`], indexes them in a cosine [`index::VectorIndex`],
//! retrieves the top chunks per query, maps them back to documents and
//! scores Recall@k, MRR and nDCG@k. [`latency`] and [`ablation`] build the
//! latency and chunking studies on top of the same run.

pub mod ablation;
pub mod chunking;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod latency;

pub use error::{Error, Result};
