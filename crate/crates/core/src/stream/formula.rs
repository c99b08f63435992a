//! Random expression trees that map feature rows to regression targets.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::StreamError;
use crate::data::Matrix;
use crate::rng::Rng;
use crate::stats::median;

/// Guard added inside `log` and `inv`.
pub const DOMAIN_EPS: f64 = 1e-9;
/// `exp` arguments are clamped to this value.
pub const EXP_CLAMP: f64 = 50.0;
/// Node outputs are clamped to ±this so that products of clamped
/// exponentials stay finite.
pub const VALUE_LIMIT: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Function {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Inv,
    Sin,
    Scalar,
    Step,
}

impl Function {
    pub const ALL: [Function; 9] = [
        Function::Add,
        Function::Sub,
        Function::Mul,
        Function::Exp,
        Function::Log,
        Function::Inv,
        Function::Sin,
        Function::Scalar,
        Function::Step,
    ];

    pub fn arity(self) -> usize {
        match self {
            Function::Add | Function::Sub | Function::Mul | Function::Step => 2,
            _ => 1,
        }
    }
}

/// Expression tree. `Step` evaluates to `branch` when `condition` exceeds the
/// threshold and to `-branch` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaNode {
    Feature(usize),
    Add(Box<FormulaNode>, Box<FormulaNode>),
    Sub(Box<FormulaNode>, Box<FormulaNode>),
    Mul(Box<FormulaNode>, Box<FormulaNode>),
    Exp(Box<FormulaNode>),
    Log(Box<FormulaNode>),
    Inv(Box<FormulaNode>),
    Sin(Box<FormulaNode>),
    Scale {
        factor: f64,
        child: Box<FormulaNode>,
    },
    Step {
        threshold: f64,
        condition: Box<FormulaNode>,
        branch: Box<FormulaNode>,
    },
}

fn guard(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-VALUE_LIMIT, VALUE_LIMIT)
    }
}

impl FormulaNode {
    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(|c| c.node_count()).sum::<usize>()
    }

    pub fn children(&self) -> Vec<&FormulaNode> {
        use FormulaNode::*;
        match self {
            Feature(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Exp(a) | Log(a) | Inv(a) | Sin(a) => vec![a],
            Scale { child, .. } => vec![child],
            Step {
                condition, branch, ..
            } => vec![condition, branch],
        }
    }

    /// Largest feature index referenced by any leaf.
    pub fn max_feature(&self) -> usize {
        match self {
            FormulaNode::Feature(i) => *i,
            _ => self
                .children()
                .iter()
                .map(|c| c.max_feature())
                .max()
                .unwrap_or(0),
        }
    }

    /// Checks leaf indices against `n_features` and that every scalar is finite.
    pub fn validate(&self, n_features: usize) -> Result<(), StreamError> {
        match self {
            FormulaNode::Feature(i) if *i >= n_features => Err(StreamError::InvalidFormula(
                format!("leaf index {i} ≥ feature count {n_features}"),
            )),
            FormulaNode::Scale { factor, .. } if !factor.is_finite() => {
                Err(StreamError::InvalidFormula("non-finite scale".into()))
            }
            FormulaNode::Step { threshold, .. } if !threshold.is_finite() => {
                Err(StreamError::InvalidFormula("non-finite threshold".into()))
            }
            _ => self
                .children()
                .iter()
                .try_for_each(|c| c.validate(n_features)),
        }
    }

    /// Evaluates the tree on one row. Inputs must be finite; the output always is.
    pub fn eval(&self, row: &[f64]) -> Result<f64, StreamError> {
        if row.len() <= self.max_feature() {
            return Err(StreamError::RowTooShort {
                needed: self.max_feature() + 1,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(StreamError::NonFiniteInput);
        }
        Ok(self.eval_unchecked(row))
    }

    pub(crate) fn eval_unchecked(&self, row: &[f64]) -> f64 {
        use FormulaNode::*;
        let v = match self {
            Feature(i) => row[*i],
            Add(a, b) => a.eval_unchecked(row) + b.eval_unchecked(row),
            Sub(a, b) => a.eval_unchecked(row) - b.eval_unchecked(row),
            Mul(a, b) => a.eval_unchecked(row) * b.eval_unchecked(row),
            Exp(a) => a.eval_unchecked(row).min(EXP_CLAMP).exp(),
            Log(a) => (a.eval_unchecked(row).abs() + DOMAIN_EPS).ln(),
            Inv(a) => {
                let x = a.eval_unchecked(row);
                // x / (x² + ε) overflows in x² before the ratio does
                if x.abs() > 1e150 {
                    1.0 / x
                } else {
                    x / (x * x + DOMAIN_EPS)
                }
            }
            Sin(a) => a.eval_unchecked(row).sin(),
            Scale { factor, child } => factor * child.eval_unchecked(row),
            Step {
                threshold,
                condition,
                branch,
            } => {
                let b = branch.eval_unchecked(row);
                if condition.eval_unchecked(row) > *threshold {
                    b
                } else {
                    -b
                }
            }
        };
        guard(v)
    }

    pub fn eval_rows(&self, rows: &Matrix) -> Vec<f64> {
        rows.iter_rows().map(|r| self.eval_unchecked(r)).collect()
    }

    /// Sets every step threshold to the median of its condition over `rows`,
    /// so step nodes split the observed data instead of sitting off-support.
    pub fn calibrate_thresholds(&mut self, rows: &Matrix) {
        if rows.is_empty() {
            return;
        }
        self.calibrate_inner(rows);
    }

    fn calibrate_inner(&mut self, rows: &Matrix) -> Vec<f64> {
        use FormulaNode::*;
        match self {
            Step {
                threshold,
                condition,
                branch,
            } => {
                let cond = condition.calibrate_inner(rows);
                let br = branch.calibrate_inner(rows);
                *threshold = median(&cond);
                cond.iter()
                    .zip(br)
                    .map(|(&c, b)| guard(if c > *threshold { b } else { -b }))
                    .collect()
            }
            Feature(_) => self.eval_rows(rows),
            _ => {
                match self {
                    Add(a, b) | Sub(a, b) | Mul(a, b) => {
                        a.calibrate_inner(rows);
                        b.calibrate_inner(rows);
                    }
                    Exp(a) | Log(a) | Inv(a) | Sin(a) | Scale { child: a, .. } => {
                        a.calibrate_inner(rows);
                    }
                    _ => unreachable!(),
                }
                self.eval_rows(rows)
            }
        }
    }
}

/// Builds a random tree over `n_features` leaves with about `eta` nodes.
///
/// With at least one unary function available the count is exact. A purely
/// binary set only yields odd counts, so an even `eta` is rounded down.
pub fn build_formula(
    n_features: usize,
    eta: usize,
    functions: &[Function],
    rng: &mut Rng,
) -> Result<FormulaNode, StreamError> {
    if n_features == 0 {
        return Err(StreamError::Config("formula needs at least one feature".into()));
    }
    if eta == 0 {
        return Err(StreamError::Config("formula size must be ≥ 1".into()));
    }
    if functions.is_empty() {
        return Err(StreamError::Config("empty function set".into()));
    }
    let unary: Vec<Function> = functions.iter().copied().filter(|f| f.arity() == 1).collect();
    let binary: Vec<Function> = functions.iter().copied().filter(|f| f.arity() == 2).collect();
    let target = if unary.is_empty() && eta % 2 == 0 {
        eta - 1
    } else {
        eta
    };
    let builder = Builder {
        n_features,
        unary,
        binary,
    };
    Ok(builder.grow(target, rng))
}

struct Builder {
    n_features: usize,
    unary: Vec<Function>,
    binary: Vec<Function>,
}

impl Builder {
    fn leaf(&self, rng: &mut Rng) -> FormulaNode {
        FormulaNode::Feature(rng.random_range(0..self.n_features))
    }

    fn grow(&self, budget: usize, rng: &mut Rng) -> FormulaNode {
        if budget <= 1 {
            return self.leaf(rng);
        }
        let mut options: Vec<Function> = self.unary.clone();
        if budget >= 3 {
            options.extend(&self.binary);
        }
        let Some(&op) = options.choose(rng) else {
            return self.leaf(rng);
        };
        if op.arity() == 1 {
            let child = Box::new(self.grow(budget - 1, rng));
            return match op {
                Function::Exp => FormulaNode::Exp(child),
                Function::Log => FormulaNode::Log(child),
                Function::Inv => FormulaNode::Inv(child),
                Function::Sin => FormulaNode::Sin(child),
                Function::Scalar => {
                    let mag: f64 = rng.random_range(0.5..2.0);
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    FormulaNode::Scale {
                        factor: sign * mag,
                        child,
                    }
                }
                _ => unreachable!(),
            };
        }
        let rest = budget - 1;
        let left = if self.unary.is_empty() {
            // both sides must stay odd
            2 * rng.random_range(0..rest / 2) + 1
        } else {
            rng.random_range(1..rest)
        };
        let a = Box::new(self.grow(left, rng));
        let b = Box::new(self.grow(rest - left, rng));
        match op {
            Function::Add => FormulaNode::Add(a, b),
            Function::Sub => FormulaNode::Sub(a, b),
            Function::Mul => FormulaNode::Mul(a, b),
            Function::Step => FormulaNode::Step {
                threshold: rng.random_range(-1.0..1.0),
                condition: a,
                branch: b,
            },
            _ => unreachable!(),
        }
    }
}
