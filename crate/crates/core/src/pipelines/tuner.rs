//! Hyperparameter selection on a trailing validation split.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::models::{Distance, ModelKind, ModelSpec};
use super::{min_viable_rows, score_psi, FeatureEngineerSpec, PipelineError};
use crate::data::Matrix;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TunerKind {
    Defaults,
    GridSearch,
    RandomSearch { budget: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunerSpec {
    #[serde(flatten)]
    pub kind: TunerKind,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub model: ModelSpec,
    pub psi: f64,
}

impl TunerSpec {
    pub fn defaults() -> Self {
        Self {
            kind: TunerKind::Defaults,
            validation_fraction: 0.2,
        }
    }

    pub fn grid() -> Self {
        Self {
            kind: TunerKind::GridSearch,
            validation_fraction: 0.2,
        }
    }

    pub fn random(budget: usize, seed: u64) -> Self {
        Self {
            kind: TunerKind::RandomSearch { budget, seed },
            validation_fraction: 0.2,
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            TunerKind::Defaults => "defaults".into(),
            TunerKind::GridSearch => "grid".into(),
            TunerKind::RandomSearch { budget, .. } => format!("random({budget})"),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(PipelineError::InvalidSpec(format!(
                "validation fraction {} outside (0, 0.5]",
                self.validation_fraction
            )));
        }
        if let TunerKind::RandomSearch { budget: 0, .. } = self.kind {
            return Err(PipelineError::InvalidSpec("random search budget 0".into()));
        }
        Ok(())
    }

    fn candidates(&self, model: ModelSpec) -> Vec<ModelSpec> {
        match self.kind {
            TunerKind::Defaults => vec![model],
            TunerKind::GridSearch => grid_for(model.kind()),
            TunerKind::RandomSearch { budget, seed } => {
                let mut rng = seeded(seed);
                (0..budget).map(|_| random_config(model.kind(), &mut rng)).collect()
            }
        }
    }
}

/// The search grid of one model family.
pub fn grid_for(kind: ModelKind) -> Vec<ModelSpec> {
    match kind {
        ModelKind::LinearLeastSquares => vec![ModelSpec::LinearLeastSquares],
        ModelKind::Ridge => [1e-3, 1e-1, 1.0, 10.0]
            .into_iter()
            .map(|lambda| ModelSpec::Ridge { lambda })
            .collect(),
        ModelKind::RegressionTree => {
            let mut v = Vec::new();
            for max_depth in [2, 4, 8, 16] {
                for min_leaf in [1, 5, 20] {
                    v.push(ModelSpec::RegressionTree { max_depth, min_leaf });
                }
            }
            v
        }
        ModelKind::Knn => {
            let mut v = Vec::new();
            for k in [1, 3, 9, 27] {
                for distance in [Distance::L1, Distance::L2] {
                    v.push(ModelSpec::Knn { k, distance });
                }
            }
            v
        }
    }
}

fn random_config(kind: ModelKind, rng: &mut crate::rng::Rng) -> ModelSpec {
    match kind {
        ModelKind::LinearLeastSquares => ModelSpec::LinearLeastSquares,
        ModelKind::Ridge => ModelSpec::Ridge {
            lambda: 10f64.powf(rng.random_range(-4.0..2.0)),
        },
        ModelKind::RegressionTree => ModelSpec::RegressionTree {
            max_depth: rng.random_range(1..=16),
            min_leaf: rng.random_range(1..=30),
        },
        ModelKind::Knn => ModelSpec::Knn {
            k: rng.random_range(1..=30),
            distance: if rng.random_bool(0.5) { Distance::L1 } else { Distance::L2 },
        },
    }
}

/// Scores every candidate on the trailing validation rows and returns the
/// first one with the highest ψ. Falls back to `model` when there is a
/// single candidate or the split leaves too few training rows.
pub(super) fn select(
    fe: FeatureEngineerSpec,
    model: ModelSpec,
    tuner: &TunerSpec,
    x: &Matrix,
    y: &[f64],
) -> Result<(ModelSpec, Vec<Trial>), PipelineError> {
    let candidates = tuner.candidates(model);
    let n = x.rows();
    let n_val = ((n as f64) * tuner.validation_fraction).round() as usize;
    let n_tr = n - n_val;
    if candidates.len() <= 1 && matches!(tuner.kind, TunerKind::Defaults) {
        return Ok((candidates.first().copied().unwrap_or(model), Vec::new()));
    }
    if n_val < 2 || n_tr < min_viable_rows(x.cols()) {
        return Ok((model, Vec::new()));
    }
    let (xt, yt) = (x.slice_rows(0..n_tr), &y[..n_tr]);
    let (xv, yv) = (x.slice_rows(n_tr..n), &y[n_tr..]);
    let fitted_fe = fe.fit(&xt, yt)?;
    let zt = fitted_fe.transform(&xt);
    let zv = fitted_fe.transform(&xv);
    let mut trials = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (m, _) = c.fit(&zt, yt)?;
        let pred: Vec<f64> = zv.iter_rows().map(|r| m.predict_row(r)).collect();
        trials.push(Trial {
            model: c,
            psi: score_psi(&pred, yv)?,
        });
    }
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.psi > trials[best].psi {
            best = i;
        }
    }
    Ok((trials[best].model, trials))
}
