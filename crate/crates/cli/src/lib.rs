//! Command-line layer: configuration schema, run directories, CSV logs,
//! SVG plots and the `pretrain`, `grpo`, `baseline`, `eval` and `ablate`
//! commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod logs;
pub mod plot;
pub mod rundir;
