//! Command implementations behind the `dpfw` binary.

pub mod bench;
pub mod commands;
pub mod config;
