//! Feature engineering steps.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::Matrix;

/// Cross terms are only formed among this many best-correlated columns.
pub const POLY_MAX_BASE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FeatureEngineerSpec {
    Identity,
    Standardize,
    MinMax,
    PolynomialDeg2,
    TopKCorrelationSelect { k: usize },
}

impl FeatureEngineerSpec {
    pub fn name(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Standardize => "standardize".into(),
            Self::MinMax => "minmax".into(),
            Self::PolynomialDeg2 => "poly2".into(),
            Self::TopKCorrelationSelect { k } => format!("top{k}"),
        }
    }

    pub fn validate(&self, n_features: usize) -> Result<(), PipelineError> {
        if let Self::TopKCorrelationSelect { k } = *self {
            if k == 0 || k > n_features {
                return Err(PipelineError::InvalidSpec(format!(
                    "top-k selection with k={k} over {n_features} features"
                )));
            }
        }
        Ok(())
    }

    pub fn fit(&self, x: &Matrix, y: &[f64]) -> Result<FittedFe, PipelineError> {
        self.validate(x.cols())?;
        let m = x.cols();
        Ok(match *self {
            Self::Identity => FittedFe::Affine {
                shift: vec![0.0; m],
                scale: vec![1.0; m],
                select: None,
            },
            Self::Standardize => {
                let (shift, scale) = moments(x);
                FittedFe::Affine {
                    shift,
                    scale,
                    select: None,
                }
            }
            Self::MinMax => {
                let mut shift = vec![f64::INFINITY; m];
                let mut hi = vec![f64::NEG_INFINITY; m];
                for r in x.iter_rows() {
                    for j in 0..m {
                        shift[j] = shift[j].min(r[j]);
                        hi[j] = hi[j].max(r[j]);
                    }
                }
                let scale = shift
                    .iter()
                    .zip(&hi)
                    .map(|(lo, hi)| if hi > lo { hi - lo } else { 1.0 })
                    .collect();
                FittedFe::Affine {
                    shift,
                    scale,
                    select: None,
                }
            }
            Self::PolynomialDeg2 => {
                let (shift, scale) = moments(x);
                let mut base = ranked_by_correlation(x, y);
                base.truncate(POLY_MAX_BASE);
                base.sort_unstable();
                FittedFe::Poly2 { shift, scale, base }
            }
            Self::TopKCorrelationSelect { k } => {
                let mut idx = ranked_by_correlation(x, y);
                idx.truncate(k);
                idx.sort_unstable();
                FittedFe::Affine {
                    shift: vec![0.0; m],
                    scale: vec![1.0; m],
                    select: Some(idx),
                }
            }
        })
    }
}

/// Column means and population stds (1 for constant columns).
fn moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let m = x.cols();
    let n = x.rows().max(1) as f64;
    let mut mean = vec![0.0; m];
    for r in x.iter_rows() {
        for j in 0..m {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m];
    for r in x.iter_rows() {
        for j in 0..m {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let sd = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Column indices sorted by decreasing |corr(x_j, y)|, ties by index.
fn ranked_by_correlation(x: &Matrix, y: &[f64]) -> Vec<usize> {
    let n = x.rows() as f64;
    let my = y.iter().sum::<f64>() / n.max(1.0);
    let score: Vec<f64> = (0..x.cols())
        .map(|j| {
            let col = x.column(j);
            let mx = col.iter().sum::<f64>() / n.max(1.0);
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in col.iter().zip(y) {
                sxy += (a - mx) * (b - my);
                sxx += (a - mx) * (a - mx);
                syy += (b - my) * (b - my);
            }
            if sxx > 0.0 && syy > 0.0 {
                (sxy / (sxx * syy).sqrt()).abs()
            } else {
                0.0
            }
        })
        .collect();
    let mut idx: Vec<usize> = (0..x.cols()).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedFe {
    /// `(x − shift) / scale`, optionally restricted to `select` columns.
    Affine {
        shift: Vec<f64>,
        scale: Vec<f64>,
        select: Option<Vec<usize>>,
    },
    /// Standardized columns, then squares and pairwise products of `base`.
    Poly2 {
        shift: Vec<f64>,
        scale: Vec<f64>,
        base: Vec<usize>,
    },
}

impl FittedFe {
    pub fn input_cols(&self) -> usize {
        match self {
            FittedFe::Affine { shift, .. } | FittedFe::Poly2 { shift, .. } => shift.len(),
        }
    }

    pub fn output_cols(&self) -> usize {
        match self {
            FittedFe::Affine { shift, select, .. } => select.as_ref().map_or(shift.len(), Vec::len),
            FittedFe::Poly2 { shift, base, .. } => shift.len() + base.len() * (base.len() + 1) / 2,
        }
    }

    pub fn transform_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            FittedFe::Affine {
                shift,
                scale,
                select,
            } => match select {
                Some(idx) => out.extend(idx.iter().map(|&j| (row[j] - shift[j]) / scale[j])),
                None => out.extend(row.iter().zip(shift).zip(scale).map(|((v, s), c)| (v - s) / c)),
            },
            FittedFe::Poly2 { shift, scale, base } => {
                out.extend(row.iter().zip(shift).zip(scale).map(|((v, s), c)| (v - s) / c));
                for (a, &i) in base.iter().enumerate() {
                    for &j in &base[a..] {
                        out.push(out[i] * out[j]);
                    }
                }
            }
        }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let cols = self.output_cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        let mut buf = Vec::with_capacity(cols);
        for r in x.iter_rows() {
            self.transform_row(r, &mut buf);
            data.extend_from_slice(&buf);
        }
        Matrix::new(x.rows(), cols, data)
    }
}
