//! Experiment harness: class-incremental protocol, ablations and metrics
//! export on top of `ccfi-core`.

pub mod ablation;
pub mod config;
pub mod error;
pub mod metrics;
pub mod protocol;

pub use config::{Method, ProtocolSpec};
pub use error::{HarnessError, Result};
