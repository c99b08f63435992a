//! Experiment harness: scenarios, the five compared models, the θ metric,
//! dataset complexity, and sweeps with CSV/JSON reports.

mod sweep;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::divide::{self, DivideError, FitCounter, ImprovedConfig, SearchBudget};
use crate::ensemble::{
    train_ensemble, train_single, EnsembleError, EnsembleEvent, EnsembleGenome, FitnessConfig,
    GenePools, LiveModel, PipelineGene,
};
use crate::ga::{self, init_population, EnsembleProblem, GaConfig, GaError, GenerationRecord};
use crate::pipelines::{fit_pipeline, score_psi, FeatureEngineerSpec, ModelSpec, TunerSpec};
use crate::rng::{derive_seed, rng_from};
use crate::stream::{
    generate_stream, DriftCase, EtaMode, MIN_HORIZON, FormulaConfig, GeneratorConfig, ScheduleConfig, StreamError,
    StreamState,
};

pub use sweep::{
    build_report, read_records, report_csv, run_sweep, write_report, write_run_artifacts, KeySeeds,
    ReportCell, SweepKind, SweepOutcome, SweepSpec, SweepSummary,
};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Rows pooled for one per-step ψ when a step adds fewer rows than this.
pub const MIN_SCORED_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("ψ matrix is missing cells: dataset {dataset} has {got} of {expected} steps")]
    MissingCells {
        dataset: usize,
        expected: usize,
        got: usize,
    },
    #[error("{0} is not a baseline model")]
    NotBaseline(ModelTag),
    #[error("output {0} already exists (pass overwrite to replace it)")]
    OutputExists(String),
    #[error("stored records are inconsistent: {0}")]
    BadRecords(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Ga(#[from] GaError),
    #[error(transparent)]
    Divide(#[from] DivideError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    SingleRandom,
    MultiRandom,
    AutoSingle,
    Proposed,
    Improved,
}

impl ModelTag {
    pub const ALL: [ModelTag; 5] = [
        ModelTag::SingleRandom,
        ModelTag::MultiRandom,
        ModelTag::AutoSingle,
        ModelTag::Proposed,
        ModelTag::Improved,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::SingleRandom => "single_random",
            ModelTag::MultiRandom => "multi_random",
            ModelTag::AutoSingle => "auto_single",
            ModelTag::Proposed => "proposed",
            ModelTag::Improved => "improved",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, ModelTag::SingleRandom | ModelTag::MultiRandom | ModelTag::AutoSingle)
    }

    fn index(self) -> u64 {
        ModelTag::ALL.iter().position(|&t| t == self).expect("listed") as u64
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        ModelTag::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| format!("unknown model '{s}' (expected one of single_random, multi_random, auto_single, proposed, improved)"))
    }
}

/// One experimental condition, replayed over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub case: DriftCase,
    pub n_runs: usize,
    pub generator: GeneratorConfig,
    pub schedule: ScheduleConfig,
    pub horizon: u32,
    /// `[t₀, t₁]`: models are trained at `t₀` and scored on steps `t₀+1..=t₁`.
    pub frame: [u32; 2],
    pub fitness: FitnessConfig,
    pub ga: GaConfig,
    pub budget: SearchBudget,
    /// Stage-1 add/remove probability of the three-stage variant.
    pub add_remove: f64,
    /// Explicit seeds; empty means `0..n_runs`.
    pub seeds: Vec<u64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            case: DriftCase::Random,
            n_runs: 50,
            generator: GeneratorConfig {
                samples: [1000, 1000],
                features: [3, 10],
                formula: FormulaConfig {
                    eta: [1, 2],
                    eta_mode: EtaMode::PerFeature,
                    ..Default::default()
                },
                growth: 100,
                ..Default::default()
            },
            schedule: ScheduleConfig::default(),
            horizon: 50,
            frame: [20, 50],
            fitness: FitnessConfig::default(),
            ga: GaConfig {
                pop_size: 12,
                generations: 6,
                ..Default::default()
            },
            budget: SearchBudget::default(),
            add_remove: 0.1,
            seeds: Vec::new(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidScenario(m));
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} (supported: {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.horizon < MIN_HORIZON {
            return bad(format!("horizon {} < {MIN_HORIZON} steps", self.horizon));
        }
        let [t0, t1] = self.frame;
        if !(t0 < t1 && t1 <= self.horizon) {
            return bad(format!("frame [{t0}, {t1}] must satisfy t0 < t1 ≤ horizon {}", self.horizon));
        }
        if self.n_runs < 1 {
            return bad("n_runs must be ≥ 1".into());
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.n_runs {
            return bad(format!("{} seeds listed for n_runs {}", self.seeds.len(), self.n_runs));
        }
        if t0 <= self.fitness.tau {
            return bad(format!("t0 {t0} must exceed tau {}", self.fitness.tau));
        }
        if !(0.0..=1.0).contains(&self.add_remove) {
            return bad("add_remove outside [0, 1]".into());
        }
        self.generator.validate()?;
        self.fitness.validate()?;
        self.ga.validate()?;
        self.budget.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.n_runs as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// The stream every model sees for `seed`.
    pub fn stream(&self, seed: u64) -> Result<StreamState, ExperimentError> {
        let cfg = GeneratorConfig {
            seed,
            ..self.generator.clone()
        };
        Ok(generate_stream(&cfg, self.case, self.horizon, &self.schedule)?)
    }

    /// The step at which the genetic searches look for a model.
    pub fn search_step(&self) -> u32 {
        self.frame[0] - self.fitness.tau
    }
}

/// The outcome of one model on one seeded stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelTag,
    pub case: DriftCase,
    /// Sweep cell label and position.
    pub key: String,
    pub cell_index: usize,
    pub seed: u64,
    pub frame: [u32; 2],
    /// ψ per step `t₀+1..=t₁`.
    pub psi: Vec<f64>,
    pub theta: f64,
    /// ψ measured when the model was trained at `t₀`.
    pub psi_train: f64,
    pub fitness: Option<f64>,
    /// The model could not be trained and a mean predictor stood in.
    pub failed: bool,
    pub genome: Option<EnsembleGenome>,
    pub gene: Option<PipelineGene>,
    pub events: Vec<EnsembleEvent>,
    pub ga_trace: Vec<GenerationRecord>,
    pub complexity: Option<f64>,
    /// Stored next to the record, not in it, so records stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn relative(&self) -> Option<f64> {
        (self.psi_train > 1e-9).then(|| self.theta / self.psi_train)
    }
}

/// `θ = (1/((t₁−t₀)N)) Σᵢ Σⱼ ψ`, with one row per dataset holding the
/// `t₁ − t₀` per-step values.
pub fn theta(psi: &[Vec<f64>], t0: u32, t1: u32) -> Result<f64, ExperimentError> {
    if t0 >= t1 {
        return Err(ExperimentError::InvalidScenario(format!("frame [{t0}, {t1}] is empty")));
    }
    let steps = (t1 - t0) as usize;
    if psi.is_empty() {
        return Err(ExperimentError::MissingCells {
            dataset: 0,
            expected: steps,
            got: 0,
        });
    }
    let mut sum = 0.0;
    for (i, row) in psi.iter().enumerate() {
        if row.len() != steps || row.iter().any(|v| !v.is_finite()) {
            return Err(ExperimentError::MissingCells {
                dataset: i,
                expected: steps,
                got: row.iter().filter(|v| v.is_finite()).count(),
            });
        }
        sum += row.iter().sum::<f64>();
    }
    Ok(sum / (steps * psi.len()) as f64)
}

/// `1 − R²` of an in-sample least-squares fit, clamped to `[0, 1]`.
pub fn complexity_score(data: &Dataset) -> Result<f64, ExperimentError> {
    let x = data.features(0..data.len());
    let p = fit_pipeline(
        FeatureEngineerSpec::Identity,
        ModelSpec::LinearLeastSquares,
        TunerSpec::defaults(),
        &x,
        data.targets(),
    )
    .map_err(EnsembleError::from)?;
    let pred = p.predict(&x).map_err(EnsembleError::from)?;
    let r2 = score_psi(&pred, data.targets()).map_err(EnsembleError::from)?;
    Ok((1.0 - r2).clamp(0.0, 1.0))
}

/// Predicts the training mean; stands in when a model cannot be trained.
struct MeanModel {
    value: f64,
}

impl LiveModel for MeanModel {
    fn on_new_batch(&mut self, data: &Dataset, step: u32) -> Result<Vec<f64>, EnsembleError> {
        Ok(vec![self.value; data.step_range(step, step).len()])
    }

    fn events(&self) -> &[EnsembleEvent] {
        &[]
    }

    fn psi_train(&self) -> f64 {
        0.0
    }
}

const MODEL_PATH: u64 = 0x6d6f_6465;
const GA_PATH: u64 = 0x6761;

struct Trained {
    model: Box<dyn LiveModel>,
    genome: Option<EnsembleGenome>,
    gene: Option<PipelineGene>,
    fitness: Option<f64>,
    trace: Vec<GenerationRecord>,
}

fn train_model(
    tag: ModelTag,
    scenario: &ScenarioSpec,
    seed: u64,
    now: &Dataset,
    d0: &Dataset,
) -> Result<Trained, ExperimentError> {
    let pools = GenePools::standard(d0.n_features());
    let t0 = scenario.frame[0];
    let tau = scenario.fitness.tau;
    let eval_fraction = scenario.fitness.eval_fraction;
    let mut rng = rng_from(seed, &[MODEL_PATH, tag.index()]);
    let ga_cfg = GaConfig {
        seed: derive_seed(seed, &[GA_PATH, tag.index()]),
        ..scenario.ga.clone()
    };
    let single = |gene: PipelineGene| -> Result<Trained, ExperimentError> {
        let m = train_single(&gene, d0, eval_fraction)?;
        Ok(Trained {
            model: Box::new(m),
            genome: None,
            gene: Some(gene),
            fitness: None,
            trace: Vec::new(),
        })
    };
    let ensemble = |genome: EnsembleGenome, fitness, trace| -> Result<Trained, ExperimentError> {
        let m = train_ensemble(&genome, d0, &scenario.fitness)?;
        Ok(Trained {
            model: Box::new(m),
            genome: Some(genome),
            gene: None,
            fitness,
            trace,
        })
    };
    match tag {
        ModelTag::SingleRandom => single(pools.random_member([0, t0], &mut rng)),
        ModelTag::AutoSingle => {
            let r = divide::per_subset_search([0, t0], d0, &pools, &scenario.budget, &FitCounter::default());
            single(r.gene)
        }
        ModelTag::MultiRandom => {
            let cfg = GaConfig {
                pop_size: 1,
                ..ga_cfg
            };
            let genome = init_population(&pools, &cfg, t0).remove(0);
            ensemble(genome, None, Vec::new())
        }
        ModelTag::Proposed => {
            let problem = EnsembleProblem {
                pools,
                cfg: ga_cfg.clone(),
                fitness: scenario.fitness,
                now,
                future: d0,
            };
            let run = ga::run(&problem, &ga_cfg)?;
            ensemble(run.best.shifted(tau), Some(run.best_fitness), run.trace)
        }
        ModelTag::Improved => {
            let cfg = ImprovedConfig {
                ga: ga_cfg,
                fitness: scenario.fitness,
                budget: scenario.budget,
                add_remove: scenario.add_remove,
            };
            let run = divide::run_improved(&cfg, &pools, now, d0)?;
            ensemble(run.genome.shifted(tau), None, run.trace)
        }
    }
}

/// Per-step ψ over `t₀+1..=t₁`. Steps adding fewer than
/// [`MIN_SCORED_ROWS`] rows are scored together with the steps before them.
fn live_psi(model: &mut dyn LiveModel, state: &mut StreamState, t0: u32, t1: u32) -> Result<Vec<f64>, ExperimentError> {
    let mut pred_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::with_capacity((t1 - t0) as usize);
    for s in t0 + 1..=t1 {
        state.advance_to(s)?;
        let data = state.data();
        pred_hist.push(model.on_new_batch(data, s)?);
        y_hist.push(data.targets_in(data.step_range(s, s)).to_vec());
        let mut p = Vec::new();
        let mut y = Vec::new();
        for k in (0..pred_hist.len()).rev() {
            p.extend_from_slice(&pred_hist[k]);
            y.extend_from_slice(&y_hist[k]);
            if y.len() >= MIN_SCORED_ROWS {
                break;
            }
        }
        out.push(score_psi(&p, &y).unwrap_or(0.0));
    }
    Ok(out)
}

/// Trains `tag` on the scenario's stream for `seed` and runs it live over
/// the evaluation frame.
pub fn run_model(tag: ModelTag, scenario: &ScenarioSpec, seed: u64) -> Result<RunRecord, ExperimentError> {
    scenario.validate()?;
    let state = scenario.stream(seed)?;
    run_on_stream(tag, scenario, seed, state)
}

pub(crate) fn run_on_stream(
    tag: ModelTag,
    scenario: &ScenarioSpec,
    seed: u64,
    mut state: StreamState,
) -> Result<RunRecord, ExperimentError> {
    let start = Instant::now();
    let [t0, t1] = scenario.frame;
    state.advance_to(scenario.search_step())?;
    let now = state.data().clone();
    state.advance_to(t0)?;
    let d0 = state.data().clone();
    let (trained, failed) = match train_model(tag, scenario, seed, &now, &d0) {
        Ok(t) => (t, false),
        Err(ExperimentError::Ensemble(e)) => {
            log::warn!("{tag} on seed {seed} could not be trained ({e}); scoring a mean predictor");
            let stand_in = Trained {
                model: Box::new(MeanModel {
                    value: crate::stats::mean(d0.targets()),
                }),
                genome: None,
                gene: None,
                fitness: None,
                trace: Vec::new(),
            };
            (stand_in, true)
        }
        Err(e) => return Err(e),
    };
    let Trained {
        mut model,
        genome,
        gene,
        fitness,
        trace,
    } = trained;
    let psi_train = model.psi_train();
    let psi = live_psi(model.as_mut(), &mut state, t0, t1)?;
    let theta = theta(std::slice::from_ref(&psi), t0, t1)?;
    Ok(RunRecord {
        model: tag,
        case: scenario.case,
        key: scenario.case.name().to_string(),
        cell_index: 0,
        seed,
        frame: [t0, t1],
        psi,
        theta,
        psi_train,
        fitness,
        failed,
        genome,
        gene,
        events: model.events().to_vec(),
        ga_trace: trace,
        complexity: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// One of the three reference models.
pub fn run_baseline(tag: ModelTag, scenario: &ScenarioSpec, seed: u64) -> Result<RunRecord, ExperimentError> {
    if !tag.is_baseline() {
        return Err(ExperimentError::NotBaseline(tag));
    }
    run_model(tag, scenario, seed)
}
