//! Distributed task-oriented semantic communication simulator.
//!
//! A transmitter encodes modality-A features into channel symbols, a semantic
//! relay decodes them, fuses locally available modality-B features and
//! re-encodes, and a receiver classifies. Around that pipeline sit federated
//! training, workload balancing for edge clusters and the experiment drivers.

pub mod channel;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod federated;
pub mod jscrc;
pub mod numcore;
pub mod rng;
pub mod scheduler;
pub mod training;

pub use error::{ConfigIssue, Error, Result};
pub use exec::ExecMode;
