//! HTTP service and command-line plumbing around `fllm-core`.
//!
//! The service is read-only: it loads a catalog and a persisted index at
//! startup and answers `/api/*` requests from them.

pub mod api;
pub mod config;
pub mod engine;

pub use config::{Config, ConfigError};
pub use engine::{recommend, Engine, RecommendRequest, RecommendResponse};
