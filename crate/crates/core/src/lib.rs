//! High-impedance fault detection on radial distribution feeders.
//!
//! The crate simulates a three-phase radial feeder carrying a
//! waveform-level HIF model, produces noisy phasor measurement snapshots,
//! runs two-step per-phase weighted-least-squares state estimation and
//! flags the faulted phase and lateral from the spread of composed
//! measurement errors.

pub mod analytics;
pub mod chi2;
pub mod error;
pub mod estimator;
pub mod hif;
pub mod model;
pub mod network;
pub mod powerflow;
pub mod report;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
