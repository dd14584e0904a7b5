//! Command-line front end and persistence: run configuration,
//! checkpointing, and the subcommands driving the full pipeline.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use commands::{run, Cli};
pub use config::{parse_config, RunConfig};
