//! Library side of the `qarsmith` command: config loading, the stage graph
//! and run reports. The binary is a thin clap layer over this.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use pipeline::{Pipeline, SkipRecord, Stage, StageStatus};
