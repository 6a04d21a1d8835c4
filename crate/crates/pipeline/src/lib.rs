//! Configuration, orchestration and persistence around `vip-core`.

pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod run;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
pub use manifest::RunManifest;
