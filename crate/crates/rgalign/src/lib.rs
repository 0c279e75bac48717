//! File formats, the three-stage pipeline and the command-line front end
//! over `rgalign-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use error::{AppError, AppResult};
pub use pipeline::{Round, Run, RunManifest};
