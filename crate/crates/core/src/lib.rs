//! Retrieval-augmented fashion recommendation engine.
//!
//! - [`catalog`]: Polyvore-style ingestion, validation and disjoint splits.
//! - [`qagen`]: binary/FITB question generation, LLM auto-QA and JSONL export.
//! - [`embedstore`]: embedding providers and an exact cosine top-k index.
//! - [`retrieval`]: multi-path query planning, execution and rank fusion.
//! - [`inference`]: prompt assembly, chat backends and answer parsing.
//! - [`evalharness`]: FITB accuracy runs and training-ratio sweeps.
//! - [`synthetic`]: seeded synthetic catalogs for tests and demos.

pub mod catalog;
pub mod embedstore;
pub mod evalharness;
mod http;
pub mod inference;
pub mod qagen;
pub mod retrieval;
pub mod synthetic;

pub use http::{HttpError, RetryPolicy};
