//! Session orchestration for interactive expression learning: calibration,
//! the act/reward/update loop, persistence, reports and the HTTP service.

pub mod config;
pub mod engine;
pub mod error;
pub mod report;
pub mod simulate;

pub use config::SessionConfig;
pub use engine::{EpochSummary, InteractionRecord, Session};
pub use error::{Result, SessionError};
pub mod server;
