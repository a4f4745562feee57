//! HTTP/JSON steering service: scenes, windows, prediction and guided
//! regeneration over cached goal logits, with an append-only run log.

pub mod api;
pub mod config;
pub mod engine;
pub mod error;
pub mod http;
pub mod runs;

pub use config::ServiceConfig;
pub use engine::{Engine, Models};
pub use error::ServiceError;
pub use http::{build_engine, router, serve};
pub use runs::{read_runs, RunLog, RunRecord};
