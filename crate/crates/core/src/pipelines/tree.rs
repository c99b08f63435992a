//! CART regression tree with exact variance-reduction splits.

use serde::{Deserialize, Serialize};

use crate::data::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl RegressionTree {
    pub fn fit(x: &Matrix, y: &[f64], max_depth: usize, min_leaf: usize) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        let idx: Vec<usize> = (0..x.rows()).collect();
        tree.grow(x, y, idx, max_depth, min_leaf.max(1));
        tree
    }

    pub fn depth(&self) -> usize {
        fn d(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + d(nodes, left).max(d(nodes, right)),
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            d(&self.nodes, 0)
        }
    }

    fn grow(&mut self, x: &Matrix, y: &[f64], idx: Vec<usize>, depth: usize, min_leaf: usize) -> usize {
        let here = self.nodes.len();
        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| y[i]).sum();
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        self.nodes.push(Node::Leaf(mean));
        if depth == 0 || n < 2 * min_leaf {
            return here;
        }
        let Some(split) = best_split(x, y, &idx, min_leaf, sum) else {
            return here;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| x.get(i, split.feature) <= split.threshold);
        let left = self.grow(x, y, l, depth - 1, min_leaf);
        let right = self.grow(x, y, r, depth - 1, min_leaf);
        self.nodes[here] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        here
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Maximizes `S_L²/n_L + S_R²/n_R − S²/n`, which orders splits exactly as
/// the reduction in squared error does.
fn best_split(x: &Matrix, y: &[f64], idx: &[usize], min_leaf: usize, total: f64) -> Option<Split> {
    let n = idx.len();
    let base = total * total / n as f64;
    let sse: f64 = {
        let mean = total / n as f64;
        idx.iter().map(|&i| (y[i] - mean).powi(2)).sum()
    };
    if sse <= 1e-12 * (1.0 + base.abs()) {
        return None;
    }
    let mut best: Option<Split> = None;
    let mut order = idx.to_vec();
    for f in 0..x.cols() {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[order[k]];
            let nl = k + 1;
            let nr = n - nl;
            let (v, next) = (x.get(order[k], f), x.get(order[k + 1], f));
            if nl < min_leaf || nr < min_leaf || v == next {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - base;
            if gain > best.as_ref().map_or(1e-12 * sse, |b| b.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: 0.5 * (v + next),
                    gain,
                });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_split_recovers_step() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 - 49.5) / 10.0, (i % 7) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[0] > 0.0 { 1.0 } else { -1.0 }).collect();
        let t = RegressionTree::fit(&Matrix::from_rows(&rows), &y, 1, 1);
        assert_eq!(t.depth(), 1);
        for (r, v) in rows.iter().zip(&y) {
            assert_eq!(t.predict_row(r), *v);
        }
    }

    #[test]
    fn ties_pick_lowest_feature() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let t = RegressionTree::fit(&Matrix::from_rows(&rows), &y, 1, 1);
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, threshold, .. } if threshold == 9.5));
    }

    #[test]
    fn respects_min_leaf_and_constant_targets() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let t = RegressionTree::fit(&Matrix::from_rows(&rows), &[3.0; 10], 5, 1);
        assert_eq!(t.depth(), 0);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let t = RegressionTree::fit(&Matrix::from_rows(&rows), &y, 10, 5);
        assert_eq!(t.depth(), 1);
    }
}
