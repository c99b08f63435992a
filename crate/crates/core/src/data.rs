//! Row-major sample storage shared by the generator, the pipelines and the
//! ensemble. Rows carry the step at which they arrived; since the stream is
//! append-only the step tags are sorted and any step window is a contiguous
//! row range.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Copies a contiguous block of rows.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix::new(range.len(), self.cols, data)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    pub fn hstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix::new(self.rows, cols, data)
    }
}

/// A growing labelled dataset D(t).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    n_features: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    steps: Vec<u32>,
}

impl Dataset {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            ..Default::default()
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn push(&mut self, row: &[f64], target: f64, step: u32) {
        assert_eq!(row.len(), self.n_features);
        debug_assert!(self.steps.last().is_none_or(|&s| s <= step));
        self.x.extend_from_slice(row);
        self.y.push(target);
        self.steps.push(step);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn last_step(&self) -> u32 {
        self.steps.last().copied().unwrap_or(0)
    }

    /// Number of rows that arrived at or before `step`.
    pub fn len_until(&self, step: u32) -> usize {
        self.steps.partition_point(|&s| s <= step)
    }

    /// Rows whose arrival step lies in `[from, to]`.
    pub fn step_range(&self, from: u32, to: u32) -> Range<usize> {
        let start = self.steps.partition_point(|&s| s < from);
        let end = self.steps.partition_point(|&s| s <= to).max(start);
        start..end
    }

    pub fn features(&self, range: Range<usize>) -> Matrix {
        let data = self.x[range.start * self.n_features..range.end * self.n_features].to_vec();
        Matrix::new(range.len(), self.n_features, data)
    }

    pub fn targets_in(&self, range: Range<usize>) -> &[f64] {
        &self.y[range]
    }

    /// The dataset as it was at `step` (a prefix, by the append-only contract).
    pub fn snapshot(&self, step: u32) -> Dataset {
        let n = self.len_until(step);
        Dataset {
            n_features: self.n_features,
            x: self.x[..n * self.n_features].to_vec(),
            y: self.y[..n].to_vec(),
            steps: self.steps[..n].to_vec(),
        }
    }

    /// Replaces every target through `f`, used for affine-invariance checks.
    pub fn map_targets(&self, f: impl Fn(f64) -> f64) -> Dataset {
        Dataset {
            y: self.y.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Writes `step,f0,f1,…,target` CSV.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.n_features).map(|j| format!("f{j}")));
        header.push("target".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = Vec::with_capacity(self.n_features + 2);
            rec.push(self.steps[i].to_string());
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            rec.push(self.y[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let mut d = Dataset::new(2);
        for (i, step) in [0u32, 0, 1, 1, 1, 3].into_iter().enumerate() {
            d.push(&[i as f64, -(i as f64)], i as f64 * 2.0, step);
        }
        d
    }

    #[test]
    fn step_ranges_are_contiguous() {
        let d = toy();
        assert_eq!(d.step_range(0, 0), 0..2);
        assert_eq!(d.step_range(1, 3), 2..6);
        assert_eq!(d.step_range(2, 2), 5..5);
        assert_eq!(d.len_until(1), 5);
        assert_eq!(d.snapshot(1).len(), 5);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        toy().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,f0,f1,target\n0,0,-0,0\n"));
    }
}
