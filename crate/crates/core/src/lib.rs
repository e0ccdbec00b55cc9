//! Perception, state abstraction and reward learning for a robot face that
//! learns to answer human expressions from mimicry feedback.

pub mod checkpoint;
pub mod cnn;
pub mod error;
pub mod expression;
pub mod face;
pub mod learner;
pub mod numerics;
pub mod par;
pub mod reward;
pub mod som;
pub mod user;

pub use error::{CheckpointError, Error, Result};
