//! Desk-scale digital twin of a continuous metallurgical pickling line.
//!
//! The crate has three layers:
//!
//! - data synthesis: [`strip`] (strip records, speed table, standardization),
//!   [`grades`] (LSTM grade-sequence model), [`cgan`] (conditional GAN for the
//!   numeric strip columns);
//! - the line itself: [`line`] (kinematic simulation of the three transport
//!   units and both loopers), [`cagent`] (analytic conservative speed
//!   controller), [`rl`] (stage-combination Q-network bank);
//! - orchestration: [`harness`] (scenario precomputation, training schedule,
//!   evaluation metrics, reports) plus the `pickline` CLI binary.
//!
//! [`nn`] is the shared neural substrate (dense/LSTM/embedding layers,
//! losses, Adam and decaying-SGD optimizers) used by all three models.

pub mod cagent;
pub mod cgan;
pub mod grades;
pub mod harness;
pub mod line;
pub mod nn;
pub mod rl;
pub mod strip;

mod error;

pub use error::{Error, Result};
