//! Library surface of the command-line harness, reused by the binary and the
//! acceptance suite.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
