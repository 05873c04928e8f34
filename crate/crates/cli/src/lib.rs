//! Experiment plumbing behind the `prguide` binary: configuration loading,
//! scenario construction, and the run/sweep/diagnose/train commands.
//!
//! Everything here is a thin, deterministic layer over `prguide-core`; the
//! binary in `main.rs` only parses arguments and maps errors to exit codes.

pub mod config;
pub mod runner;

/// A problem with the user's configuration or invocation, as opposed to a
/// failure while running. The binary reports these with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}
