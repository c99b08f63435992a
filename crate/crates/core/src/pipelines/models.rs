//! Regressors: least squares, ridge, regression tree and k-nearest neighbours.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::tree::RegressionTree;
use super::PipelineError;
use crate::data::Matrix;

/// Ridge penalty used when least squares meets a singular system.
pub const SINGULAR_FALLBACK_LAMBDA: f64 = 1e-6;
const PIVOT_RATIO_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distance {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelSpec {
    LinearLeastSquares,
    Ridge { lambda: f64 },
    RegressionTree { max_depth: usize, min_leaf: usize },
    Knn { k: usize, distance: Distance },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    LinearLeastSquares,
    Ridge,
    RegressionTree,
    Knn,
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::LinearLeastSquares => ModelKind::LinearLeastSquares,
            ModelSpec::Ridge { .. } => ModelKind::Ridge,
            ModelSpec::RegressionTree { .. } => ModelKind::RegressionTree,
            ModelSpec::Knn { .. } => ModelKind::Knn,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelSpec::LinearLeastSquares => "lls".into(),
            ModelSpec::Ridge { lambda } => format!("ridge({lambda})"),
            ModelSpec::RegressionTree { max_depth, min_leaf } => format!("tree({max_depth},{min_leaf})"),
            ModelSpec::Knn { k, distance } => format!("knn({k},{distance:?})"),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let ok = match *self {
            ModelSpec::LinearLeastSquares => true,
            ModelSpec::Ridge { lambda } => lambda >= 0.0 && lambda.is_finite(),
            ModelSpec::RegressionTree { max_depth, min_leaf } => max_depth >= 1 && min_leaf >= 1,
            ModelSpec::Knn { k, .. } => k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(PipelineError::InvalidSpec(format!("{self:?}")))
        }
    }

    /// Fits on already transformed features. Returns the model and whether
    /// least squares had to fall back to a tiny ridge penalty.
    pub fn fit(&self, x: &Matrix, y: &[f64]) -> Result<(FittedModel, bool), PipelineError> {
        self.validate()?;
        Ok(match *self {
            ModelSpec::LinearLeastSquares => match solve_linear(x, y, 0.0) {
                Some(m) => (m, false),
                None => (
                    solve_linear(x, y, SINGULAR_FALLBACK_LAMBDA)
                        .unwrap_or_else(|| constant(y)),
                    true,
                ),
            },
            ModelSpec::Ridge { lambda } => (
                solve_linear(x, y, lambda)
                    .or_else(|| solve_linear(x, y, lambda.max(SINGULAR_FALLBACK_LAMBDA)))
                    .unwrap_or_else(|| constant(y)),
                false,
            ),
            ModelSpec::RegressionTree { max_depth, min_leaf } => (
                FittedModel::Tree(RegressionTree::fit(x, y, max_depth, min_leaf)),
                false,
            ),
            ModelSpec::Knn { k, distance } => (
                FittedModel::Knn {
                    x: x.clone(),
                    y: y.to_vec(),
                    k,
                    distance,
                },
                false,
            ),
        })
    }
}

fn constant(y: &[f64]) -> FittedModel {
    FittedModel::Linear {
        coef: Vec::new(),
        intercept: crate::stats::mean(y),
    }
}

/// Centered normal equations `(XᵀX + λI)β = Xᵀy` via Cholesky. `None` when the
/// factorization fails or its smallest pivot is negligible (only checked for
/// `λ = 0`).
fn solve_linear(x: &Matrix, y: &[f64], lambda: f64) -> Option<FittedModel> {
    let (n, m) = (x.rows(), x.cols());
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let xm: Vec<f64> = (0..m).map(|j| x.iter_rows().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ym = y.iter().sum::<f64>() / nf;
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut c = vec![0.0; m];
    for (r, &yi) in x.iter_rows().zip(y) {
        for j in 0..m {
            c[j] = r[j] - xm[j];
        }
        let yc = yi - ym;
        for a in 0..m {
            rhs[a] += c[a] * yc;
            for b in a..m {
                gram[(a, b)] += c[a] * c[b];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += lambda;
    }
    let chol = gram.cholesky()?;
    if lambda == 0.0 {
        let d: Vec<f64> = (0..m).map(|i| chol.l_dirty()[(i, i)].powi(2)).collect();
        let max = d.iter().copied().fold(0.0, f64::max);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        if m > 0 && !(min > PIVOT_RATIO_MIN * max) {
            return None;
        }
    }
    let beta = chol.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let coef: Vec<f64> = beta.iter().copied().collect();
    let intercept = ym - coef.iter().zip(&xm).map(|(b, m)| b * m).sum::<f64>();
    Some(FittedModel::Linear { coef, intercept })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Linear { coef: Vec<f64>, intercept: f64 },
    Tree(RegressionTree),
    Knn {
        x: Matrix,
        y: Vec<f64>,
        k: usize,
        distance: Distance,
    },
}

impl FittedModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self {
            FittedModel::Linear { coef, intercept } => {
                intercept + coef.iter().zip(row).map(|(b, v)| b * v).sum::<f64>()
            }
            FittedModel::Tree(t) => t.predict_row(row),
            FittedModel::Knn { x, y, k, distance } => knn_predict(x, y, *k, *distance, row),
        }
    }
}

/// Mean target of the `k` nearest rows; distance ties go to the lower index.
fn knn_predict(x: &Matrix, y: &[f64], k: usize, distance: Distance, row: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mut d: Vec<(f64, usize)> = x
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let v = match distance {
                Distance::L1 => r.iter().zip(row).map(|(a, b)| (a - b).abs()).sum(),
                Distance::L2 => r.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum(),
            };
            (v, i)
        })
        .collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
    }
    d[..k].iter().map(|&(_, i)| y[i]).sum::<f64>() / k as f64
}
