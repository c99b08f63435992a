//! Generator configuration, the initial dataset and the step function.

use rand::Rng as _;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::drift::{check_schedule, schedule_drifts, DriftCase, DriftEvent, ScheduleConfig};
use super::formula::{build_formula, FormulaNode, Function};
use super::{Family, FeatureSpec, StreamError};
use crate::data::{Dataset, Matrix};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::stats::std_dev;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

const STREAM_PATH: u64 = 0x5354;
const SCHEDULE_PATH: u64 = 0x5343;
/// Rows drawn to calibrate a fresh formula at a swap.
const SWAP_SAMPLE: usize = 500;
const SAMPLE_BOUNDS: [usize; 2] = [100, 100_000];
const FEATURE_BOUNDS: [usize; 2] = [3, 50];
const ETA_MULT_BOUNDS: [usize; 2] = [1, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// `eta` holds multipliers of the feature count.
    #[default]
    PerFeature,
    /// `eta` holds node counts.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormulaConfig {
    pub eta: [usize; 2],
    pub eta_mode: EtaMode,
    pub functions: Vec<Function>,
}

impl Default for FormulaConfig {
    fn default() -> Self {
        Self {
            eta: [1, 10],
            eta_mode: EtaMode::PerFeature,
            functions: Function::ALL.to_vec(),
        }
    }
}

impl FormulaConfig {
    pub fn eta_range(&self, n_features: usize) -> [usize; 2] {
        match self.eta_mode {
            EtaMode::PerFeature => [self.eta[0] * n_features, self.eta[1] * n_features],
            EtaMode::Absolute => self.eta,
        }
    }

    pub fn draw_eta(&self, n_features: usize, rng: &mut Rng) -> usize {
        let [lo, hi] = self.eta_range(n_features);
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub schema_version: u32,
    pub samples: [usize; 2],
    pub features: [usize; 2],
    pub distributions: Vec<Family>,
    #[serde(flatten)]
    pub formula: FormulaConfig,
    /// New rows per step.
    pub growth: usize,
    /// Target noise std; `None` means 5% of the clean target std on `D(0)`.
    pub noise_sd: Option<f64>,
    pub seed: u64,
    /// Allows sizes outside the published generator bounds.
    pub override_bounds: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            samples: SAMPLE_BOUNDS,
            features: FEATURE_BOUNDS,
            distributions: Family::ALL.to_vec(),
            formula: FormulaConfig::default(),
            growth: 100,
            noise_sd: None,
            seed: 0,
            override_bounds: false,
        }
    }
}

impl GeneratorConfig {
    /// A 200-row stream with exactly `n_features` features.
    pub fn small(seed: u64, n_features: usize) -> Self {
        Self {
            samples: [200, 200],
            features: [n_features, n_features],
            formula: FormulaConfig {
                eta: [1, 2],
                ..Default::default()
            },
            growth: 50,
            seed,
            override_bounds: n_features < FEATURE_BOUNDS[0],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let cfg = |m: String| Err(StreamError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return cfg(format!("unsupported schema_version {}", self.schema_version));
        }
        for (name, [lo, hi]) in [
            ("samples", self.samples),
            ("features", self.features),
            ("eta", self.formula.eta),
        ] {
            if lo > hi {
                return cfg(format!("{name} range [{lo}, {hi}] is inverted"));
            }
            if hi == 0 {
                return cfg(format!("{name} range is empty"));
            }
        }
        if self.samples[0] < 2 {
            return cfg("at least 2 initial samples are required".into());
        }
        if self.features[0] == 0 || self.formula.eta[0] == 0 {
            return cfg("feature count and formula size must be ≥ 1".into());
        }
        if !self.override_bounds {
            let within = |[lo, hi]: [usize; 2], [blo, bhi]: [usize; 2]| lo >= blo && hi <= bhi;
            if !within(self.samples, SAMPLE_BOUNDS) {
                return cfg(format!("samples outside {SAMPLE_BOUNDS:?}; set override_bounds"));
            }
            if !within(self.features, FEATURE_BOUNDS) {
                return cfg(format!("features outside {FEATURE_BOUNDS:?}; set override_bounds"));
            }
            if self.formula.eta_mode == EtaMode::PerFeature
                && !within(self.formula.eta, ETA_MULT_BOUNDS)
            {
                return cfg(format!("eta outside {ETA_MULT_BOUNDS:?}; set override_bounds"));
            }
        }
        if self.distributions.is_empty() {
            return cfg("no distribution families".into());
        }
        if self.formula.functions.is_empty() {
            return cfg("empty function set".into());
        }
        let min_arity = self
            .formula
            .functions
            .iter()
            .map(|f| f.arity())
            .min()
            .unwrap_or(1);
        if self.features[0] < min_arity {
            return cfg(format!(
                "{} feature(s) cannot feed a function set whose smallest arity is {min_arity}",
                self.features[0]
            ));
        }
        if self.growth == 0 {
            return cfg("growth must be ≥ 1".into());
        }
        if let Some(sd) = self.noise_sd {
            if !(sd >= 0.0 && sd.is_finite()) {
                return cfg(format!("noise_sd {sd} must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ActiveEvent {
    index: usize,
    from: Vec<FeatureSpec>,
}

/// The growing dataset and everything needed to extend it.
#[derive(Debug, Clone)]
pub struct StreamState {
    t: u32,
    data: Dataset,
    specs: Vec<FeatureSpec>,
    formula: FormulaNode,
    formula_cfg: FormulaConfig,
    schedule: Vec<DriftEvent>,
    active: Vec<ActiveEvent>,
    growth: usize,
    noise_sd: f64,
    seed: u64,
    rng: Rng,
}

/// Draws `D(0)`.
pub fn init_dataset(config: &GeneratorConfig) -> Result<StreamState, StreamError> {
    config.validate()?;
    let mut rng = rng_from(config.seed, &[STREAM_PATH]);
    let s = rng.random_range(config.samples[0]..=config.samples[1]);
    let m = rng.random_range(config.features[0]..=config.features[1]);
    let specs: Vec<FeatureSpec> = (0..m)
        .map(|_| FeatureSpec::random_from(&config.distributions, &mut rng))
        .collect();
    let eta = config.formula.draw_eta(m, &mut rng).max(1);
    let mut formula = build_formula(m, eta, &config.formula.functions, &mut rng)?;
    let x = sample_rows(&specs, s, &mut rng);
    formula.calibrate_thresholds(&x);
    let clean = formula.eval_rows(&x);
    let noise_sd = config.noise_sd.unwrap_or_else(|| 0.05 * std_dev(&clean));
    let mut state = StreamState {
        t: 0,
        data: Dataset::new(m),
        specs,
        formula,
        formula_cfg: config.formula.clone(),
        schedule: Vec::new(),
        active: Vec::new(),
        growth: config.growth,
        noise_sd,
        seed: config.seed,
        rng,
    };
    state.append(&x, &clean);
    Ok(state)
}

/// `D(0)` plus a drift schedule drawn for `case` over `horizon` steps.
///
/// Placement can fail on crowded feature sets, so a few independent
/// schedule streams are tried before giving up.
pub fn generate_stream(
    config: &GeneratorConfig,
    case: DriftCase,
    horizon: u32,
    schedule: &ScheduleConfig,
) -> Result<StreamState, StreamError> {
    let mut state = init_dataset(config)?;
    let mut last = None;
    for attempt in 0..5 {
        let mut rng = rng_from(config.seed, &[SCHEDULE_PATH, attempt]);
        match schedule_drifts(case, horizon, &state, schedule, &mut rng) {
            Ok(events) => {
                state.set_schedule(events)?;
                return Ok(state);
            }
            Err(e @ StreamError::HorizonTooShort(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn sample_rows(specs: &[FeatureSpec], n: usize, rng: &mut Rng) -> Matrix {
    let m = specs.len();
    let cols: Vec<Vec<f64>> = specs.iter().map(|s| s.sample_n(n, rng)).collect();
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        data.extend(cols.iter().map(|c| c[i]));
    }
    Matrix::new(n, m, data)
}

impl StreamState {
    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn n_features(&self) -> usize {
        self.specs.len()
    }

    pub fn feature_specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn formula(&self) -> &FormulaNode {
        &self.formula
    }

    pub fn formula_config(&self) -> &FormulaConfig {
        &self.formula_cfg
    }

    pub fn schedule(&self) -> &[DriftEvent] {
        &self.schedule
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_growth(&mut self, growth: usize) {
        self.growth = growth.max(1);
    }

    /// Installs a drift schedule. Every event must lie in the future and
    /// no two events may touch one feature at the same step.
    pub fn set_schedule(&mut self, mut events: Vec<DriftEvent>) -> Result<(), StreamError> {
        events.sort_by_key(|e| e.start_time);
        if let Some(e) = events.iter().find(|e| e.start_time <= self.t) {
            return Err(StreamError::EventInPast {
                start: e.start_time,
                now: self.t,
            });
        }
        check_schedule(&events, self.n_features())?;
        for e in &events {
            for (&f, target) in e.affected_features.iter().zip(&e.target_specs) {
                if target.family() != self.specs[f].family() {
                    return Err(StreamError::FamilyMismatch(self.specs[f].family(), target.family()));
                }
            }
        }
        self.schedule = events;
        self.active.clear();
        Ok(())
    }

    pub fn schedule_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&self.schedule)
    }

    /// Advances the clock and appends `growth` rows.
    pub fn step(&mut self) -> Result<(), StreamError> {
        self.t += 1;
        let t = self.t;
        for (index, event) in self.schedule.iter().enumerate() {
            if event.start_time == t {
                let from = event
                    .affected_features
                    .iter()
                    .map(|&f| self.specs[f].clone())
                    .collect();
                self.active.push(ActiveEvent { index, from });
            }
        }
        let mut swaps = Vec::new();
        for a in &self.active {
            let event = &self.schedule[a.index];
            let k = t - event.start_time;
            let w = f64::from(k + 1) / f64::from(event.duration);
            for ((&f, from), to) in event.affected_features.iter().zip(&a.from).zip(&event.target_specs) {
                self.specs[f] = from.lerp(to, w)?;
            }
            if k == event.swap_offset() && event.new_formula.is_some() {
                swaps.push(a.index);
            }
        }
        let schedule = &self.schedule;
        self.active
            .retain(|a| schedule[a.index].end_time() > t + 1);
        for i in swaps {
            self.swap_formula(i);
        }
        let x = sample_rows(&self.specs, self.growth, &mut self.rng);
        let clean = self.formula.eval_rows(&x);
        self.append(&x, &clean);
        Ok(())
    }

    pub fn advance_to(&mut self, t: u32) -> Result<(), StreamError> {
        while self.t < t {
            self.step()?;
        }
        Ok(())
    }

    /// Blends the event's fresh formula into the current one, matching
    /// the two parts' spread on the current feature distributions.
    fn swap_formula(&mut self, index: usize) {
        let event = &self.schedule[index];
        let Some(fresh) = event.new_formula.clone() else {
            return;
        };
        let w = event.formula_weight;
        let probe = sample_rows(&self.specs, SWAP_SAMPLE, &mut self.rng);
        let mut fresh = fresh;
        fresh.calibrate_thresholds(&probe);
        let sd_cur = std_dev(&self.formula.eval_rows(&probe));
        let sd_fresh = std_dev(&fresh.eval_rows(&probe));
        let gain = if sd_fresh > 1e-12 && sd_cur > 1e-12 {
            sd_cur / sd_fresh
        } else {
            1.0
        };
        let cur = std::mem::replace(&mut self.formula, FormulaNode::Feature(0));
        self.formula = FormulaNode::Add(
            Box::new(FormulaNode::Scale {
                factor: 1.0 - w,
                child: Box::new(cur),
            }),
            Box::new(FormulaNode::Scale {
                factor: w * gain,
                child: Box::new(fresh),
            }),
        );
    }

    fn append(&mut self, x: &Matrix, clean: &[f64]) {
        let noise = Normal::new(0.0, self.noise_sd.max(0.0)).expect("valid noise sd");
        for (row, &c) in x.iter_rows().zip(clean) {
            let y = if self.noise_sd > 0.0 {
                c + noise.sample(&mut self.rng)
            } else {
                c
            };
            self.data.push(row, y, self.t);
        }
    }

    /// Derived seed for consumers that need randomness tied to this stream.
    pub fn derived_seed(&self, path: &[u64]) -> u64 {
        derive_seed(self.seed, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_two_sample;
    use crate::stream::{Distribution, DriftKind};

    fn normal_stream(growth: usize) -> StreamState {
        let mut s = init_dataset(&GeneratorConfig {
            samples: [500, 500],
            features: [3, 3],
            distributions: vec![Family::Normal],
            growth,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        s.specs[0] = FeatureSpec::new(Distribution::Normal { mean: 0.0, sd: 1.0 });
        s
    }

    #[test]
    fn degenerate_ranges_fix_sizes() {
        let s = init_dataset(&GeneratorConfig {
            samples: [100, 100],
            features: [3, 3],
            formula: FormulaConfig {
                eta: [3, 3],
                eta_mode: EtaMode::Absolute,
                ..Default::default()
            },
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.data().len(), 100);
        assert_eq!(s.n_features(), 3);
        assert_eq!(s.formula().node_count(), 3);
        assert_eq!(s.t(), 0);
    }

    #[test]
    fn config_errors() {
        let bad = |c: GeneratorConfig| matches!(init_dataset(&c), Err(StreamError::Config(_)));
        assert!(bad(GeneratorConfig {
            samples: [500, 100],
            ..Default::default()
        }));
        assert!(bad(GeneratorConfig {
            features: [2, 5],
            ..Default::default()
        }));
        assert!(bad(GeneratorConfig {
            features: [1, 1],
            override_bounds: true,
            formula: FormulaConfig {
                functions: vec![Function::Add],
                ..Default::default()
            },
            ..Default::default()
        }));
        assert!(bad(GeneratorConfig {
            distributions: vec![],
            ..Default::default()
        }));
    }

    #[test]
    fn step_appends_without_touching_old_rows() {
        let mut s = normal_stream(10);
        let before = s.data().clone();
        s.step().unwrap();
        assert_eq!(s.t(), 1);
        assert_eq!(s.data().len(), before.len() + 10);
        assert_eq!(s.data().snapshot(0), before);
        assert!(s.data().steps()[before.len()..].iter().all(|&t| t == 1));
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let cfg = GeneratorConfig::small(3, 4);
            let mut s = generate_stream(&cfg, DriftCase::Mixed, 30, &ScheduleConfig::default()).unwrap();
            s.advance_to(30).unwrap();
            (s.data().clone(), s.schedule().to_vec())
        };
        assert_eq!(run(), run());
    }

    fn manual_event(start: u32, duration: u32) -> DriftEvent {
        DriftEvent {
            start_time: start,
            duration,
            kind: if duration == 1 { DriftKind::Shift } else { DriftKind::Moving },
            affected_features: vec![0],
            target_specs: vec![FeatureSpec::new(Distribution::Normal { mean: 5.0, sd: 1.0 })],
            new_formula: None,
            formula_weight: 0.0,
            rate: 0.1,
        }
    }

    #[test]
    fn shift_event_separates_cohorts() {
        let mut s = normal_stream(500);
        s.set_schedule(vec![manual_event(5, 1)]).unwrap();
        s.advance_to(6).unwrap();
        let col = |r: std::ops::Range<usize>| s.data().features(r).column(0);
        let before = col(s.data().step_range(4, 4));
        let after = col(s.data().step_range(6, 6));
        assert!(ks_two_sample(&before, &after).unwrap().p_value < 1e-6);
    }

    #[test]
    fn moving_event_is_gradual() {
        let mut s = normal_stream(200);
        s.set_schedule(vec![manual_event(3, 10)]).unwrap();
        s.advance_to(12).unwrap();
        let means: Vec<f64> = (3..=12)
            .map(|t| crate::stats::mean(&s.data().features(s.data().step_range(t, t)).column(0)))
            .collect();
        let rho = spearman(&means, &(0..means.len()).map(|i| i as f64).collect::<Vec<_>>());
        assert!(rho > 0.9, "{rho}");
        assert!((means[9] - 5.0).abs() < 0.3);
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            for (k, i) in idx.into_iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn schedule_rejects_past_and_mismatched_events() {
        let mut s = normal_stream(10);
        s.advance_to(3).unwrap();
        assert!(matches!(
            s.set_schedule(vec![manual_event(2, 1)]),
            Err(StreamError::EventInPast { .. })
        ));
        let mut e = manual_event(5, 1);
        e.target_specs = vec![FeatureSpec::new(Distribution::Benford)];
        assert!(matches!(s.set_schedule(vec![e]), Err(StreamError::FamilyMismatch(..))));
    }

    #[test]
    fn formula_swap_keeps_targets_finite() {
        let cfg = GeneratorConfig::small(9, 5);
        let mut s = generate_stream(&cfg, DriftCase::Random, 40, &ScheduleConfig::default()).unwrap();
        let before = s.formula().clone();
        s.advance_to(40).unwrap();
        assert_ne!(&before, s.formula());
        assert!(s.data().targets().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = GeneratorConfig::small(1, 4);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"eta\""));
        let back: GeneratorConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: GeneratorConfig = serde_json::from_str(r#"{"seed": 4, "eta": [2, 3]}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.formula.eta, [2, 3]);
        assert_eq!(partial.growth, 100);
    }
}
