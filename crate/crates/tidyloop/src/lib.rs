//! Operator surface for the planner: configuration, file formats, the remote
//! backend, session persistence, the HTTP service and the CLI commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pref_log;
pub mod remote;
pub mod server;
pub mod sessions;

pub use tidyloop_core as core;
