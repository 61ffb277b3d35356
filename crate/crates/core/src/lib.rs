//! Deterministic single-process simulator for hierarchical federated learning
//! with additive cluster personalization, LinUCB cluster assignment and
//! Thompson-sampling client selection, plus the HierFAVG and IFCA baselines.
//!
//! Module map:
//! - [`model`]: the MLP learner, the additive two-network predictor and local SGD.
//! - [`data`]: synthetic Gaussian-mixture tasks and two-level Dirichlet partitioning.
//! - [`bandits`]: per-server LinUCB and budgeted Thompson sampling.
//! - [`aggregation`]: edge, global and cluster weighted averaging.
//! - [`orchestrator`]: the round loop for every method.
//! - [`metrics`]: accuracy, fairness, objective, communication and cluster dynamics.
//! - [`config`] / [`report`]: experiment configuration and CSV/JSON output.

pub mod aggregation;
pub mod bandits;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
pub use rng::RngStream;
