//! File formats, configuration and subcommands around `collidenet-core`.

pub mod checkpoint;
pub mod cnt;
pub mod commands;
pub mod config;
pub mod manifest;
