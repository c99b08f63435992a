//! Synthetic drifting regression streams.
//!
//! A [`StreamState`] holds the growing dataset `D(t)` together with the
//! per-feature distributions, the target formula and a schedule of
//! [`DriftEvent`]s. [`StreamState::step`] appends one batch of rows.

mod dist;
mod drift;
mod formula;
mod state;

use thiserror::Error;

pub use dist::{Distribution, Family, FeatureSpec};
pub use drift::{
    check_schedule, inverse_kolmogorov_q, ks_distance_for_rate, rate_for_ks_distance,
    schedule_drifts, DriftCase, DriftEvent, DriftKind, ScheduleConfig, MAX_DRIFT_STRENGTH,
    MAX_KS_DISTANCE, MIN_HORIZON,
};
pub use formula::{build_formula, FormulaNode, Function, DOMAIN_EPS, EXP_CLAMP, VALUE_LIMIT};
pub use state::{
    generate_stream, init_dataset, EtaMode, FormulaConfig, GeneratorConfig, StreamState,
    CONFIG_SCHEMA_VERSION,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid feature spec: {0}")]
    InvalidFeatureSpec(String),
    #[error("cannot interpolate between {0:?} and {1:?}")]
    FamilyMismatch(Family, Family),
    #[error("invalid formula: {0}")]
    InvalidFormula(String),
    #[error("row has {got} values but the formula reads feature {needed}")]
    RowTooShort { needed: usize, got: usize },
    #[error("non-finite formula input")]
    NonFiniteInput,
    #[error("invalid drift event: {0}")]
    InvalidEvent(String),
    #[error("drift events starting at t={first} and t={second} touch the same feature at once")]
    OverlappingEvents { first: u32, second: u32 },
    #[error("cannot schedule drifts: {0}")]
    HorizonTooShort(String),
    #[error("event starts at t={start} but the stream is already at t={now}")]
    EventInPast { start: u32, now: u32 },
}
