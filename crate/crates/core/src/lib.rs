//! Closed human-in-the-loop deferral pipeline.
//!
//! A classifier and a deferrer are trained online from labels produced by the
//! same fallible (simulated) experts that the deferrer routes decisions to.
//! Expert/input similarity priors bootstrap the deferrer so that biased expert
//! majorities do not lock in their bias.
//!
//! Module map:
//! - [`model`]: samples, simplex arithmetic, prediction and cost vectors.
//! - [`nn`]: small dense networks with hand-written backpropagation.
//! - [`tree`]: depth-limited CART classifier.
//! - [`experts`]: simulated experts and panels.
//! - [`dsim`]: expert/input similarity priors.
//! - [`pipeline`]: prediction vectors and aggregation.
//! - [`training`]: losses, model updates, matching algorithms and baselines.
//! - [`theoryprobe`]: Monte-Carlo witnesses for the analytical results.
//! - [`experiments`]: data generators, metrics, task runners and sweeps.
//! - [`config`]: run configuration and seed streams.

pub mod config;
pub mod dsim;
pub mod error;
pub mod experiments;
pub mod experts;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod theoryprobe;
pub mod training;
pub mod tree;

pub use error::{Error, Result};
