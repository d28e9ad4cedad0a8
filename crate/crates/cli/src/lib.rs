//! Command-line orchestration of the pipeline and the prediction service.

pub mod cli;
pub mod server;
