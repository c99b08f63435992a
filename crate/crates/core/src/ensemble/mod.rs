//! The two-level ensemble: `n` windowed member pipelines, each watched by its
//! own drift detector, stacked under a global pipeline that reads member
//! predictions and detector confidences.

mod genome;
mod live;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Matrix};
use crate::detect::DetectError;
use crate::pipelines::{
    fit_pipeline, min_viable_rows, score_psi, FeatureEngineerSpec, ModelSpec, PipelineError,
    TrainedPipeline, TunerSpec,
};

pub use genome::{EnsembleGenome, GenePools, GlobalGene, PipelineGene};
pub use live::{train_ensemble, train_single, LiveModel, MetaDataset, SingleModel, TrainedEnsemble};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("invalid genome: {0}")]
    InvalidGenome(String),
    #[error("every member window is too small to train on")]
    AllMembersDegenerate,
    #[error("global model could not be trained: {0}")]
    GlobalFit(PipelineError),
    #[error("expected {expected} feature columns, got {got}")]
    SchemaMismatch { expected: usize, got: usize },
    #[error("future stream must extend the snapshot by {tau} steps (got {got})")]
    ShortFuture { tau: u32, got: u32 },
    #[error("invalid fitness config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessConfig {
    pub omega1: f64,
    pub omega2: f64,
    /// Event horizon in steps.
    pub tau: u32,
    /// Share of the most recent rows used to fit the stacker and score ψ.
    pub eval_fraction: f64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self {
            omega1: 0.5,
            omega2: 0.5,
            tau: 10,
            eval_fraction: 0.2,
        }
    }
}

impl FitnessConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: &str| Err(EnsembleError::InvalidConfig(m.into()));
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0 && self.omega1 + self.omega2 > 0.0) {
            return bad("weights must be non-negative with a positive sum");
        }
        if self.tau < 1 {
            return bad("tau must be ≥ 1");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `L = ω₁ψ_now − ω₂(ψ_now − ψ_future)`.
pub fn fitness_value(psi_now: f64, psi_future: f64, cfg: &FitnessConfig) -> f64 {
    cfg.omega1 * psi_now - cfg.omega2 * (psi_now - psi_future)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub psi_now: f64,
    pub psi_future: f64,
    pub fitness: f64,
    pub failed: bool,
}

impl FitnessReport {
    pub fn failure() -> Self {
        Self {
            psi_now: 0.0,
            psi_future: 0.0,
            fitness: 0.0,
            failed: true,
        }
    }
}

/// Trains on `now`, runs the live loop over the next `τ` steps of `future`
/// and scores the result. Training failures score 0.
pub fn fitness(
    genome: &EnsembleGenome,
    now: &Dataset,
    future: &Dataset,
    cfg: &FitnessConfig,
) -> Result<FitnessReport, EnsembleError> {
    cfg.validate()?;
    let t = now.last_step();
    if future.last_step() < t + cfg.tau {
        return Err(EnsembleError::ShortFuture {
            tau: cfg.tau,
            got: future.last_step().saturating_sub(t),
        });
    }
    let Ok(mut model) = train_ensemble(genome, now, cfg) else {
        return Ok(FitnessReport::failure());
    };
    let psi_future = match run_live(&mut model, future, t + 1, t + cfg.tau) {
        Ok((pred, y)) if y.len() >= 2 => score_psi(&pred, &y)?,
        Ok(_) => 0.0,
        Err(_) => return Ok(FitnessReport::failure()),
    };
    let psi_now = model.psi_train();
    Ok(FitnessReport {
        psi_now,
        psi_future,
        fitness: fitness_value(psi_now, psi_future, cfg),
        failed: false,
    })
}

/// Feeds steps `from..=to` to a live model; returns pooled predictions and targets.
pub fn run_live(
    model: &mut dyn LiveModel,
    data: &Dataset,
    from: u32,
    to: u32,
) -> Result<(Vec<f64>, Vec<f64>), EnsembleError> {
    let mut pred = Vec::new();
    let mut y = Vec::new();
    for s in from..=to {
        let p = model.on_new_batch(data, s)?;
        y.extend_from_slice(data.targets_in(data.step_range(s, s)));
        pred.extend(p);
    }
    Ok((pred, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventScope {
    Member(usize),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Signal,
    Retrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEvent {
    pub step: u32,
    pub scope: EventScope,
    pub kind: EventKind,
    pub confidence: f64,
}

/// Writes `step,scope,event,confidence` rows.
pub fn write_event_csv<W: std::io::Write>(events: &[EnsembleEvent], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "scope", "event", "confidence"])?;
    for e in events {
        let scope = match e.scope {
            EventScope::Member(i) => i.to_string(),
            EventScope::Global => "global".into(),
        };
        let kind = match e.kind {
            EventKind::Signal => "signal",
            EventKind::Retrain => "retrain",
        };
        out.write_record([e.step.to_string(), scope, kind.into(), e.confidence.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// A member's fitted pipeline, or the mean target when its window was too
/// small to train on.
#[derive(Debug, Clone, PartialEq)]
pub enum MemberFit {
    Pipeline(Box<TrainedPipeline>),
    Constant(f64),
}

impl MemberFit {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, PipelineError> {
        match self {
            MemberFit::Pipeline(p) => p.predict(x),
            MemberFit::Constant(c) => Ok(vec![*c; x.rows()]),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MemberFit::Constant(_))
    }
}

/// Fits a pipeline on `rows`, or `None` when the rows cannot support one.
pub fn fit_rows(
    fe: FeatureEngineerSpec,
    model: ModelSpec,
    tuner: TunerSpec,
    data: &Dataset,
    rows: std::ops::Range<usize>,
) -> Option<TrainedPipeline> {
    if rows.len() < min_viable_rows(data.n_features()) {
        return None;
    }
    let x = data.features(rows.clone());
    fit_pipeline(fe, model, tuner, &x, data.targets_in(rows)).ok()
}

/// ψ of a pipeline fitted on the first `1 − fraction` of `rows` and scored on
/// the rest; 0 when the split cannot be fitted.
pub fn holdout_psi(
    fe: FeatureEngineerSpec,
    model: ModelSpec,
    tuner: TunerSpec,
    data: &Dataset,
    rows: std::ops::Range<usize>,
    fraction: f64,
) -> f64 {
    let n_eval = ((rows.len() as f64) * fraction).round() as usize;
    if n_eval < 2 {
        return 0.0;
    }
    let cut = rows.end - n_eval;
    let Some(p) = fit_rows(fe, model, tuner, data, rows.start..cut) else {
        return 0.0;
    };
    let tail = cut..rows.end;
    match p.predict(&data.features(tail.clone())) {
        Ok(pred) => score_psi(&pred, data.targets_in(tail)).unwrap_or(0.0),
        Err(_) => 0.0,
    }
}
