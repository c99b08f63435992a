//! Evolved two-level ensemble regressors for data streams with concept drift.
//!
//! The crate is organised bottom-up:
//!
//! * [`stream`] generates synthetic growing datasets with scheduled drift events.
//! * [`stats`] holds the two-sample Kolmogorov–Smirnov test and the drift-rate statistic.
//! * [`pipelines`] provides feature engineering, regressors, tuners and the ψ score.
//! * [`detect`] implements the streaming drift detectors.
//! * [`ensemble`] assembles the two-level model, its live loop and its fitness.
//! * [`ga`] is the genetic search over ensemble genomes.
//! * [`divide`] is the three-stage divide-and-conquer variant.
//! * [`experiments`] runs baselines, scenarios and sweeps and writes reports.

pub mod data;
pub mod detect;
pub mod divide;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod ga;
pub mod pipelines;
pub mod rng;
pub mod stats;
pub mod stream;

pub use error::{Error, Result};
