//! Configuration, pretraining and the artifact pipeline behind the CLI.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod train;

pub use config::ExperimentConfig;
pub use report::Report;
