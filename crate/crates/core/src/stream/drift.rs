//! Drift events, their scheduling, and the calibration that turns a drift
//! rate into a concrete parameter displacement.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::formula::{build_formula, FormulaNode};
use super::{FeatureSpec, StreamError, StreamState};
use crate::rng::Rng;
use crate::stats::{effective_scale, kolmogorov_q};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriftKind {
    Shift,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriftCase {
    Shift,
    Moving,
    Mixed,
    Random,
}

impl DriftCase {
    pub const ALL: [DriftCase; 4] = [
        DriftCase::Shift,
        DriftCase::Moving,
        DriftCase::Mixed,
        DriftCase::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DriftCase::Shift => "shift",
            DriftCase::Moving => "moving",
            DriftCase::Mixed => "mixed",
            DriftCase::Random => "random",
        }
    }
}

impl std::str::FromStr for DriftCase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "shift" => Ok(DriftCase::Shift),
            "moving" => Ok(DriftCase::Moving),
            "mixed" => Ok(DriftCase::Mixed),
            "random" => Ok(DriftCase::Random),
            other => Err(format!("unknown drift case `{other}`")),
        }
    }
}

/// One scheduled change of feature distributions (and optionally of the
/// target formula). Steps `start_time .. start_time + duration` are affected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub start_time: u32,
    pub duration: u32,
    pub kind: DriftKind,
    pub affected_features: Vec<usize>,
    pub target_specs: Vec<FeatureSpec>,
    /// Fresh formula blended into the current one when the event swaps formulas.
    #[serde(default)]
    pub new_formula: Option<FormulaNode>,
    /// Share of target variance handed to `new_formula` at the swap.
    #[serde(default)]
    pub formula_weight: f64,
    pub rate: f64,
}

impl DriftEvent {
    pub fn end_time(&self) -> u32 {
        self.start_time + self.duration
    }

    /// Step offset, counted from `start_time`, at which the formula swaps.
    pub fn swap_offset(&self) -> u32 {
        match self.kind {
            DriftKind::Shift => 0,
            DriftKind::Moving => self.duration / 2,
        }
    }

    pub fn validate(&self, n_features: usize) -> Result<(), StreamError> {
        let bad = |m: &str| Err(StreamError::InvalidEvent(m.to_string()));
        match self.kind {
            DriftKind::Shift if self.duration != 1 => return bad("shift events last one step"),
            DriftKind::Moving if self.duration < 2 => return bad("moving events last > 1 step"),
            _ => {}
        }
        if self.affected_features.is_empty() {
            return bad("no affected features");
        }
        if self.target_specs.len() != self.affected_features.len() {
            return bad("one target spec per affected feature");
        }
        if self.affected_features.iter().any(|&f| f >= n_features) {
            return bad("feature index out of range");
        }
        let mut seen = self.affected_features.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.affected_features.len() {
            return bad("duplicate affected feature");
        }
        if !(self.rate > 0.0) {
            return bad("rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.formula_weight) {
            return bad("formula weight outside [0, 1]");
        }
        if self.start_time == 0 {
            return bad("events start after the initial dataset (t ≥ 1)");
        }
        for s in &self.target_specs {
            s.validate()?;
        }
        if let Some(f) = &self.new_formula {
            f.validate(n_features)?;
        }
        Ok(())
    }

    fn overlaps(&self, other: &DriftEvent) -> bool {
        self.start_time < other.end_time()
            && other.start_time < self.end_time()
            && self
                .affected_features
                .iter()
                .any(|f| other.affected_features.contains(f))
    }
}

/// Rejects schedules where two events touch the same feature at the same step.
pub fn check_schedule(events: &[DriftEvent], n_features: usize) -> Result<(), StreamError> {
    for (i, a) in events.iter().enumerate() {
        a.validate(n_features)?;
        for b in &events[i + 1..] {
            if a.overlaps(b) {
                return Err(StreamError::OverlappingEvents {
                    first: a.start_time,
                    second: b.start_time,
                });
            }
        }
    }
    Ok(())
}

/// Fewest steps a drift schedule can span.
pub const MIN_HORIZON: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub shift_rate: [f64; 2],
    pub moving_rate: [f64; 2],
    pub moving_duration: [u32; 2],
    pub event_count: [usize; 2],
    /// Overrides the per-kind rate ranges (the drift-rate sweep).
    pub fixed_rate: Option<f64>,
    /// Cohort size per side at which the rate is translated into a distance.
    pub reference_cohort: usize,
    pub change_formula: bool,
    pub earliest_start: u32,
    pub placement_attempts: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            shift_rate: [0.1, 0.2],
            moving_rate: [0.01, 0.02],
            moving_duration: [5, 15],
            event_count: [2, 10],
            fixed_rate: None,
            reference_cohort: 8,
            change_formula: true,
            earliest_start: 1,
            placement_attempts: 2000,
        }
    }
}

/// Largest value of `rate × duration` the calibration accepts.
pub const MAX_DRIFT_STRENGTH: f64 = 0.999;
/// Population KS distance ceiling for generated drifts.
pub const MAX_KS_DISTANCE: f64 = 0.99;

/// Inverse of the Kolmogorov survival function on `(0, 1]`.
pub fn inverse_kolmogorov_q(p: f64) -> f64 {
    if p >= 1.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_q(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Population KS distance whose noise-free drift rate, measured between
/// cohorts of `reference_cohort` samples per side spanning `duration` steps,
/// equals `rate`.
pub fn ks_distance_for_rate(rate: f64, duration: u32, reference_cohort: usize) -> f64 {
    let strength = (rate * f64::from(duration.max(1))).clamp(0.0, MAX_DRIFT_STRENGTH);
    if strength == 0.0 {
        return 0.0;
    }
    let lambda = inverse_kolmogorov_q(1.0 - strength);
    (lambda / effective_scale(reference_cohort, reference_cohort)).min(MAX_KS_DISTANCE)
}

/// The noise-free drift rate implied by a population KS distance.
pub fn rate_for_ks_distance(distance: f64, duration: u32, reference_cohort: usize) -> f64 {
    let p = kolmogorov_q(distance * effective_scale(reference_cohort, reference_cohort));
    (1.0 - p) / f64::from(duration.max(1))
}

struct Placement {
    start: u32,
    duration: u32,
    kind: DriftKind,
    features: Vec<usize>,
}

/// One placement pass: a duration, start and feature set per event, with no
/// two events touching the same feature at the same step.
fn place(
    kinds: &[DriftKind],
    horizon: u32,
    m: usize,
    cfg: &ScheduleConfig,
    rng: &mut Rng,
) -> Result<Vec<Placement>, StreamError> {
    let mut placed: Vec<Placement> = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let duration = match kind {
            DriftKind::Shift => 1,
            DriftKind::Moving => {
                let [dlo, dhi] = cfg.moving_duration;
                let dhi = dhi.min(horizon.saturating_sub(cfg.earliest_start)).max(2);
                rng.random_range(dlo.clamp(2, dhi)..=dhi)
            }
        };
        let last_start = horizon + 1 - duration;
        if last_start < cfg.earliest_start.max(1) {
            return Err(StreamError::HorizonTooShort(format!(
                "no room for a {duration}-step event"
            )));
        }
        let mut ok = None;
        for _ in 0..cfg.placement_attempts {
            let start = rng.random_range(cfg.earliest_start.max(1)..=last_start);
            let size = rng.random_range(1..=m);
            let mut features: Vec<usize> =
                rand::seq::index::sample(rng, m, size).into_iter().collect();
            features.sort_unstable();
            let clash = placed.iter().any(|p| {
                start < p.start + p.duration
                    && p.start < start + duration
                    && p.features.iter().any(|f| features.contains(f))
            });
            if !clash {
                ok = Some(Placement {
                    start,
                    duration,
                    kind,
                    features,
                });
                break;
            }
        }
        match ok {
            Some(p) => placed.push(p),
            None => {
                return Err(StreamError::HorizonTooShort(format!(
                    "could not place event {} of {} without overlap",
                    placed.len() + 1,
                    kinds.len()
                )))
            }
        }
    }
    Ok(placed)
}

/// Placement passes tried for one drawn event list before giving up.
const PLACEMENT_ROUNDS: usize = 10;

/// Draws a drift schedule for `case` over `horizon` steps of `state`.
///
/// Event placement is drawn first and rates afterwards, so schedules that
/// differ only in `fixed_rate` share their topology.
pub fn schedule_drifts(
    case: DriftCase,
    horizon: u32,
    state: &StreamState,
    cfg: &ScheduleConfig,
    rng: &mut Rng,
) -> Result<Vec<DriftEvent>, StreamError> {
    if horizon < MIN_HORIZON {
        return Err(StreamError::HorizonTooShort(format!(
            "horizon {horizon} < {MIN_HORIZON} steps"
        )));
    }
    let m = state.n_features();
    let [lo, hi] = cfg.event_count;
    let kinds: Vec<DriftKind> = match case {
        DriftCase::Shift => vec![DriftKind::Shift],
        DriftCase::Moving => vec![DriftKind::Moving],
        DriftCase::Mixed => {
            let n = rng.random_range(lo.max(2)..=hi.max(2));
            let mut k = vec![DriftKind::Shift, DriftKind::Moving];
            k.extend((2..n).map(|_| random_kind(rng)));
            k.shuffle(rng);
            k
        }
        DriftCase::Random => {
            let n = rng.random_range(lo..=hi);
            (0..n).map(|_| random_kind(rng)).collect()
        }
    };

    let mut placed = place(&kinds, horizon, m, cfg, rng);
    for _ in 1..PLACEMENT_ROUNDS {
        if placed.is_ok() {
            break;
        }
        placed = place(&kinds, horizon, m, cfg, rng);
    }
    let mut placed = placed?;
    placed.sort_by_key(|p| p.start);

    let mut current: Vec<FeatureSpec> = state.feature_specs().to_vec();
    let mut events = Vec::with_capacity(placed.len());
    for p in placed {
        let rate = cfg.fixed_rate.unwrap_or_else(|| {
            let [a, b] = match p.kind {
                DriftKind::Shift => cfg.shift_rate,
                DriftKind::Moving => cfg.moving_rate,
            };
            if b > a {
                rng.random_range(a..b)
            } else {
                a
            }
        });
        let distance = ks_distance_for_rate(rate, p.duration, cfg.reference_cohort);
        let mut targets = Vec::with_capacity(p.features.len());
        for &f in &p.features {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let delta = current[f].displacement_for(distance);
            let target = current[f].shifted(sign * delta);
            current[f] = target.clone();
            targets.push(target);
        }
        let new_formula = if cfg.change_formula {
            let eta = state.formula_config().draw_eta(m, rng);
            Some(build_formula(m, eta, &state.formula_config().functions, rng)?)
        } else {
            None
        };
        events.push(DriftEvent {
            start_time: p.start,
            duration: p.duration,
            kind: p.kind,
            affected_features: p.features,
            target_specs: targets,
            formula_weight: if new_formula.is_some() { distance } else { 0.0 },
            new_formula,
            rate,
        });
    }
    Ok(events)
}

fn random_kind(rng: &mut Rng) -> DriftKind {
    *[DriftKind::Shift, DriftKind::Moving]
        .choose(rng)
        .expect("non-empty")
}
