//! Regression pipelines: a feature engineering step, a model and a
//! hyperparameter tuner, plus the ψ score (R² clamped to `[0, 1]`).

mod fe;
mod models;
mod tree;
mod tuner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Matrix;

pub use fe::{FeatureEngineerSpec, FittedFe, POLY_MAX_BASE};
pub use models::{Distance, FittedModel, ModelKind, ModelSpec, SINGULAR_FALLBACK_LAMBDA};
pub use tree::RegressionTree;
pub use tuner::{grid_for, TunerKind, TunerSpec, Trial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("{rows} rows cannot fit a pipeline over {features} features (need {needed})")]
    UnderdeterminedFit {
        rows: usize,
        features: usize,
        needed: usize,
    },
    #[error("expected {expected} columns, got {got}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("{0} and {1} values cannot be compared")]
    LengthMismatch(usize, usize),
    #[error("ψ needs at least 2 values, got {0}")]
    TooFewToScore(usize),
    #[error("non-finite training data")]
    NonFinite,
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
}

/// Smallest training set accepted for `n_features` columns.
pub fn min_viable_rows(n_features: usize) -> usize {
    10.max(2 * n_features)
}

/// R² clamped to `[0, 1]`. A constant target scores 1 when every prediction
/// matches it within 1e-9 and 0 otherwise.
pub fn score_psi(predictions: &[f64], y_true: &[f64]) -> Result<f64, PipelineError> {
    if predictions.len() != y_true.len() {
        return Err(PipelineError::LengthMismatch(predictions.len(), y_true.len()));
    }
    if y_true.len() < 2 {
        return Err(PipelineError::TooFewToScore(y_true.len()));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res: f64 = predictions
        .iter()
        .zip(y_true)
        .map(|(p, v)| (p - v) * (p - v))
        .sum();
    if !ss_res.is_finite() {
        return Ok(0.0);
    }
    if ss_tot <= 0.0 {
        let exact = predictions.iter().all(|p| (p - y_true[0]).abs() <= 1e-9);
        return Ok(if exact { 1.0 } else { 0.0 });
    }
    Ok((1.0 - ss_res / ss_tot).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub fe_spec: FeatureEngineerSpec,
    /// The model configuration the tuner settled on.
    pub model_spec: ModelSpec,
    pub tuner: TunerSpec,
    pub fe: FittedFe,
    pub model: FittedModel,
    pub train_rows: usize,
    /// Set when least squares hit a singular system and used a tiny ridge.
    pub ridge_fallback: bool,
    pub trials: Vec<Trial>,
    /// Step range the pipeline was trained on, when known.
    pub train_window: Option<[u32; 2]>,
}

fn check_inputs(x: &Matrix, y: &[f64]) -> Result<(), PipelineError> {
    if x.rows() != y.len() {
        return Err(PipelineError::LengthMismatch(x.rows(), y.len()));
    }
    let needed = min_viable_rows(x.cols());
    if x.rows() < needed {
        return Err(PipelineError::UnderdeterminedFit {
            rows: x.rows(),
            features: x.cols(),
            needed,
        });
    }
    if y.iter().chain(x.as_slice()).any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite);
    }
    Ok(())
}

/// Fits feature engineering and model on the given rows. The tuner picks
/// hyperparameters on the trailing validation share, then the winner is
/// refit on every row.
pub fn fit_pipeline(
    fe: FeatureEngineerSpec,
    model: ModelSpec,
    tuner: TunerSpec,
    x: &Matrix,
    y: &[f64],
) -> Result<TrainedPipeline, PipelineError> {
    check_inputs(x, y)?;
    fe.validate(x.cols())?;
    model.validate()?;
    tuner.validate()?;
    let (chosen, trials) = tuner::select(fe, model, &tuner, x, y)?;
    let (fitted_fe, fitted, fallback) = fit_once(fe, chosen, x, y)?;
    Ok(TrainedPipeline {
        fe_spec: fe,
        model_spec: chosen,
        tuner,
        fe: fitted_fe,
        model: fitted,
        train_rows: x.rows(),
        ridge_fallback: fallback,
        trials,
        train_window: None,
    })
}

fn fit_once(
    fe: FeatureEngineerSpec,
    model: ModelSpec,
    x: &Matrix,
    y: &[f64],
) -> Result<(FittedFe, FittedModel, bool), PipelineError> {
    let fitted_fe = fe.fit(x, y)?;
    let z = fitted_fe.transform(x);
    let (m, fallback) = model.fit(&z, y)?;
    if fallback {
        log::debug!("singular least-squares system; refit with ridge λ={SINGULAR_FALLBACK_LAMBDA}");
    }
    Ok((fitted_fe, m, fallback))
}

impl TrainedPipeline {
    pub fn n_features(&self) -> usize {
        self.fe.input_cols()
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, PipelineError> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        if x.cols() != self.n_features() {
            return Err(PipelineError::ColumnMismatch {
                expected: self.n_features(),
                got: x.cols(),
            });
        }
        let mut buf = Vec::with_capacity(self.fe.output_cols());
        Ok(x.iter_rows()
            .map(|r| {
                self.fe.transform_row(r, &mut buf);
                self.model.predict_row(&buf)
            })
            .collect())
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64, PipelineError> {
        if row.len() != self.n_features() {
            return Err(PipelineError::ColumnMismatch {
                expected: self.n_features(),
                got: row.len(),
            });
        }
        let mut buf = Vec::with_capacity(self.fe.output_cols());
        self.fe.transform_row(row, &mut buf);
        Ok(self.model.predict_row(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_data(n: usize) -> (Matrix, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let a = i as f64;
                vec![(a * 0.31).sin() * 4.0, (a * 0.17).cos() * 2.0 + a * 0.01, (a * 1.1).sin()]
            })
            .collect();
        let y = rows.iter().map(|r| 1.5 * r[0] - 0.5 * r[1] + 2.0 * r[2] + 3.0).collect();
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn psi_examples() {
        let y = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(score_psi(&y, &y).unwrap(), 1.0);
        assert_eq!(score_psi(&[3.75; 4], &y).unwrap(), 0.0);
        assert_eq!(score_psi(&[8.0, 4.0, 2.0, 1.0], &y).unwrap(), 0.0);
        assert_eq!(score_psi(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(score_psi(&[2.0, 2.1], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(score_psi(&[1.0], &[1.0]).is_err());
        assert!(score_psi(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn too_few_rows() {
        let (x, y) = linear_data(9);
        let r = fit_pipeline(
            FeatureEngineerSpec::Identity,
            ModelSpec::LinearLeastSquares,
            TunerSpec::defaults(),
            &x,
            &y,
        );
        assert!(matches!(r, Err(PipelineError::UnderdeterminedFit { needed: 10, .. })));
    }

    #[test]
    fn linear_recovery_and_determinism() {
        let (x, y) = linear_data(40);
        let p = fit_pipeline(
            FeatureEngineerSpec::Standardize,
            ModelSpec::LinearLeastSquares,
            TunerSpec::defaults(),
            &x,
            &y,
        )
        .unwrap();
        let pred = p.predict(&x).unwrap();
        let res: f64 = pred.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(res < 1e-6, "{res}");
        assert_eq!(pred, p.predict(&x).unwrap());
        assert!(p.predict(&Matrix::zeros(0, 3)).unwrap().is_empty());
        assert!(matches!(
            p.predict(&Matrix::zeros(2, 4)),
            Err(PipelineError::ColumnMismatch { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn tuner_winner_dominates_trials() {
        let (x, y) = linear_data(120);
        for tuner in [TunerSpec::grid(), TunerSpec::random(6, 3)] {
            for model in [
                ModelSpec::Ridge { lambda: 1.0 },
                ModelSpec::RegressionTree { max_depth: 6, min_leaf: 5 },
                ModelSpec::Knn { k: 5, distance: Distance::L2 },
            ] {
                let p = fit_pipeline(FeatureEngineerSpec::MinMax, model, tuner, &x, &y).unwrap();
                assert!(!p.trials.is_empty());
                let best = p.trials.iter().map(|t| t.psi).fold(f64::NEG_INFINITY, f64::max);
                let chosen = p.trials.iter().find(|t| t.model == p.model_spec).unwrap();
                assert_eq!(chosen.psi, best);
            }
        }
    }
}
