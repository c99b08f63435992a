//! Sweeps over cases, drift rates, dataset sizes and complexity buckets.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{complexity_score, run_on_stream, ExperimentError, ModelTag, RunRecord, ScenarioSpec};
use crate::ensemble::write_event_csv;
use crate::rng::derive_seed;
use crate::stats::{mean, sample_std};
use crate::stream::DriftCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Compare,
    DriftRate,
    Size,
    Complexity,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Compare => "compare",
            SweepKind::DriftRate => "drift_rate",
            SweepKind::Size => "size",
            SweepKind::Complexity => "complexity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub kind: SweepKind,
    pub base: ScenarioSpec,
    /// Empty means all five models for `compare` and the proposed model otherwise.
    pub models: Vec<ModelTag>,
    pub cases: Vec<DriftCase>,
    pub rates: Vec<f64>,
    pub sizes: Vec<usize>,
    pub growths: Vec<usize>,
    /// Allows initial sizes above 10⁴.
    pub large_sizes: bool,
    pub buckets: Vec<f64>,
    pub bucket_tolerance: f64,
    pub bucket_attempts: usize,
    /// Write per-run stream, genome and event files.
    pub artifacts: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            schema_version: super::SCENARIO_SCHEMA_VERSION,
            kind: SweepKind::Compare,
            base: ScenarioSpec::default(),
            models: Vec::new(),
            cases: DriftCase::ALL.to_vec(),
            rates: vec![0.01, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2],
            sizes: vec![100, 1000, 10_000],
            growths: vec![1, 10, 100, 1000],
            large_sizes: false,
            buckets: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            bucket_tolerance: 0.05,
            bucket_attempts: 5000,
            artifacts: true,
        }
    }
}

/// A sweep cell before seeds are attached.
#[derive(Debug, Clone)]
struct Cell {
    key: String,
    scenario: ScenarioSpec,
    seeds: Vec<u64>,
}

const COMPLEXITY_PATH: u64 = 0x636f_6d70;

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidScenario(m));
        if self.schema_version != super::SCENARIO_SCHEMA_VERSION {
            return bad(format!("sweep schema_version {}", self.schema_version));
        }
        self.base.validate()?;
        match self.kind {
            SweepKind::Compare if self.cases.is_empty() => return bad("no cases".into()),
            SweepKind::DriftRate if self.rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) || self.rates.is_empty() => {
                return bad("rates must be positive".into())
            }
            SweepKind::Size => {
                if self.sizes.is_empty() || self.growths.is_empty() {
                    return bad("sizes and growths must be non-empty".into());
                }
                if !self.large_sizes && self.sizes.iter().any(|&s| s > 10_000) {
                    return bad("initial sizes above 10000 need large_sizes".into());
                }
                if self.growths.contains(&0) {
                    return bad("growth must be ≥ 1".into());
                }
            }
            SweepKind::Complexity if self.buckets.is_empty() || !(self.bucket_tolerance > 0.0) => {
                return bad("buckets must be non-empty with a positive tolerance".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn models(&self) -> Vec<ModelTag> {
        if !self.models.is_empty() {
            return self.models.clone();
        }
        match self.kind {
            SweepKind::Compare => ModelTag::ALL.to_vec(),
            _ => vec![ModelTag::Proposed],
        }
    }

    fn cells(&self) -> Result<(Vec<Cell>, Vec<String>), ExperimentError> {
        let base = &self.base;
        let seeds = base.seeds();
        let mut gaps = Vec::new();
        let cells = match self.kind {
            SweepKind::Compare => self
                .cases
                .iter()
                .map(|&case| Cell {
                    key: case.name().to_string(),
                    scenario: ScenarioSpec { case, ..base.clone() },
                    seeds: seeds.clone(),
                })
                .collect(),
            SweepKind::DriftRate => self
                .rates
                .iter()
                .map(|&r| {
                    let mut sc = base.clone();
                    sc.schedule.fixed_rate = Some(r);
                    Cell {
                        key: format!("rate={r}"),
                        scenario: sc,
                        seeds: seeds.clone(),
                    }
                })
                .collect(),
            SweepKind::Size => {
                let mut out = Vec::new();
                for &size in &self.sizes {
                    for &g in &self.growths {
                        let mut sc = base.clone();
                        sc.generator.samples = [size, size];
                        sc.generator.growth = g;
                        out.push(Cell {
                            key: format!("size={size},growth={g}"),
                            scenario: sc,
                            seeds: seeds.clone(),
                        });
                    }
                }
                out
            }
            SweepKind::Complexity => {
                let found = self.bucket_seeds()?;
                self.buckets
                    .iter()
                    .zip(found)
                    .map(|(&b, s)| {
                        if s.len() < base.n_runs {
                            gaps.push(format!("complexity={b}: {} of {} datasets", s.len(), base.n_runs));
                        }
                        Cell {
                            key: format!("complexity={b}"),
                            scenario: base.clone(),
                            seeds: s,
                        }
                    })
                    .collect()
            }
        };
        Ok((cells, gaps))
    }

    /// Seeds whose initial dataset scores within the tolerance of each bucket.
    fn bucket_seeds(&self) -> Result<Vec<Vec<u64>>, ExperimentError> {
        let n = self.base.n_runs;
        let mut found: Vec<Vec<u64>> = vec![Vec::new(); self.buckets.len()];
        let master = self.base.seeds().first().copied().unwrap_or(0);
        const CHUNK: usize = 64;
        let mut a = 0;
        while a < self.bucket_attempts && found.iter().any(|f| f.len() < n) {
            let hi = (a + CHUNK).min(self.bucket_attempts);
            let scored: Vec<(u64, Option<f64>)> = (a..hi)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_seed(master, &[COMPLEXITY_PATH, i as u64]);
                    let score = self.base.stream(seed).ok().and_then(|s| complexity_score(s.data()).ok());
                    (seed, score)
                })
                .collect();
            for (seed, score) in scored {
                let Some(c) = score else { continue };
                if let Some(k) = self
                    .buckets
                    .iter()
                    .enumerate()
                    .position(|(k, &b)| (c - b).abs() <= self.bucket_tolerance && found[k].len() < n)
                {
                    found[k].push(seed);
                }
            }
            a = hi;
        }
        Ok(found)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: ModelTag,
    pub key: String,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// `mean (sd)`, or `gap` when no run contributed.
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySeeds {
    pub key: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: SweepKind,
    pub spec: SweepSpec,
    pub keys: Vec<KeySeeds>,
    pub gaps: Vec<String>,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub summary: SweepSummary,
}

fn metrics(kind: SweepKind) -> &'static [&'static str] {
    match kind {
        SweepKind::Complexity => &["theta", "relative"],
        _ => &["theta"],
    }
}

/// Mean and sample SD per (cell, model, metric), in cell order then model order.
pub fn build_report(kind: SweepKind, keys: &[String], models: &[ModelTag], records: &[RunRecord]) -> Vec<ReportCell> {
    let mut out = Vec::new();
    for key in keys {
        for &model in models {
            for &metric in metrics(kind) {
                let mut rs: Vec<&RunRecord> = records.iter().filter(|r| &r.key == key && r.model == model).collect();
                rs.sort_by_key(|r| r.seed);
                let vals: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| if metric == "theta" { Some(r.theta) } else { r.relative() })
                    .collect();
                let (m, sd, cell) = if vals.is_empty() {
                    (None, None, "gap".to_string())
                } else {
                    let m = mean(&vals);
                    let sd = if vals.len() > 1 { sample_std(&vals) } else { 0.0 };
                    (Some(m), Some(sd), format!("{m:.3} ({sd:.3})"))
                };
                out.push(ReportCell {
                    model,
                    key: key.clone(),
                    metric: metric.to_string(),
                    n: vals.len(),
                    mean: m,
                    sd,
                    cell,
                });
            }
        }
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Renders the `model,key,metric,n,mean,sd,cell` report.
pub fn report_csv(summary: &SweepSummary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    w.write_record(["model", "key", "metric", "n", "mean", "sd", "cell"]).expect("in-memory write");
    for c in &summary.cells {
        w.write_record([
            c.model.name().to_string(),
            c.key.clone(),
            c.metric.clone(),
            c.n.to_string(),
            fmt(c.mean),
            fmt(c.sd),
            c.cell.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, summary: &SweepSummary) -> Result<(), ExperimentError> {
    let path = dir.join("report.csv");
    fs::write(&path, report_csv(summary)).map_err(io_err(&path))?;
    write_json(&dir.join("summary.json"), summary)
}

/// Writes `<model>.record.json`, `.timing.json`, `.events.csv` and the
/// genome or gene JSON of one run into `dir`.
pub fn write_run_artifacts(dir: &Path, rec: &RunRecord) -> Result<(), ExperimentError> {
    let m = rec.model.name();
    write_json(&dir.join(format!("{m}.record.json")), rec)?;
    write_json(
        &dir.join(format!("{m}.timing.json")),
        &serde_json::json!({ "wall_time_s": rec.wall_time_s }),
    )?;
    if let Some(g) = &rec.genome {
        write_json(&dir.join(format!("{m}.genome.json")), g)?;
    }
    if let Some(g) = &rec.gene {
        write_json(&dir.join(format!("{m}.gene.json")), g)?;
    }
    let path = dir.join(format!("{m}.events.csv"));
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_event_csv(&rec.events, file).map_err(|source| ExperimentError::Csv {
        path: path.display().to_string(),
        source,
    })
}

/// Runs every (cell, seed) job in parallel; each job shares one generated
/// stream across all models. With `out`, writes run directories
/// `<out>/<kind>/<key>/<seed>/`, `report.csv` and `summary.json`.
pub fn run_sweep(spec: &SweepSpec, out: Option<&Path>, overwrite: bool) -> Result<SweepOutcome, ExperimentError> {
    spec.validate()?;
    let root: Option<PathBuf> = out.map(|o| o.join(spec.kind.name()));
    if let Some(r) = &root {
        if r.exists() {
            if !overwrite {
                return Err(ExperimentError::OutputExists(r.display().to_string()));
            }
            fs::remove_dir_all(r).map_err(io_err(r))?;
        }
        fs::create_dir_all(r).map_err(io_err(r))?;
    }
    let (cells, gaps) = spec.cells()?;
    let models = spec.models();
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let per_job: Vec<Result<Vec<RunRecord>, ExperimentError>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let cell = &cells[i];
            let state = cell.scenario.stream(seed)?;
            let complexity = (spec.kind == SweepKind::Complexity)
                .then(|| complexity_score(&state.data().clone()))
                .transpose()?;
            let dir = root.as_ref().map(|r| r.join(&cell.key).join(seed.to_string()));
            if let (Some(d), true) = (&dir, spec.artifacts) {
                fs::create_dir_all(d).map_err(io_err(d))?;
                let mut full = state.clone();
                full.advance_to(cell.scenario.frame[1])?;
                let path = d.join("stream.csv");
                let file = fs::File::create(&path).map_err(io_err(&path))?;
                full.data().write_csv(file).map_err(|source| ExperimentError::Csv {
                    path: path.display().to_string(),
                    source,
                })?;
                let sched = d.join("schedule.json");
                let text = state.schedule_json().map_err(|source| ExperimentError::Json {
                    path: sched.display().to_string(),
                    source,
                })?;
                fs::write(&sched, text + "\n").map_err(io_err(&sched))?;
            }
            let mut recs = Vec::with_capacity(models.len());
            for &tag in &models {
                let mut r = run_on_stream(tag, &cell.scenario, seed, state.clone())?;
                r.key = cell.key.clone();
                r.cell_index = i;
                r.complexity = complexity;
                if let Some(d) = &dir {
                    fs::create_dir_all(d).map_err(io_err(d))?;
                    write_run_artifacts(d, &r)?;
                }
                log::info!("{} {} seed {}: θ = {:.4}", cell.key, tag, seed, r.theta);
                recs.push(r);
            }
            Ok(recs)
        })
        .collect();
    let mut records = Vec::with_capacity(jobs.len() * models.len());
    for r in per_job {
        records.extend(r?);
    }
    let keys: Vec<String> = cells.iter().map(|c| c.key.clone()).collect();
    let summary = SweepSummary {
        kind: spec.kind,
        spec: spec.clone(),
        keys: cells
            .iter()
            .map(|c| KeySeeds {
                key: c.key.clone(),
                seeds: c.seeds.clone(),
            })
            .collect(),
        gaps,
        cells: build_report(spec.kind, &keys, &models, &records),
    };
    if let Some(r) = &root {
        write_report(r, &summary)?;
    }
    Ok(SweepOutcome { records, summary })
}

/// Loads every `*.record.json` below `dir`, sorted by cell, seed and model.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.to_string_lossy().ends_with(".record.json") {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let rec: RunRecord = serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
                    path: path.display().to_string(),
                    source,
                })?;
                out.push(rec);
            }
        }
    }
    out.sort_by(|a, b| (a.cell_index, a.seed, a.model).cmp(&(b.cell_index, b.seed, b.model)));
    Ok(out)
}

impl SweepSummary {
    /// Rebuilds the report cells from stored records without refitting.
    pub fn recompute(&self, records: &[RunRecord]) -> Result<SweepSummary, ExperimentError> {
        for r in records {
            let again = super::theta(std::slice::from_ref(&r.psi), r.frame[0], r.frame[1])?;
            if (again - r.theta).abs() > 1e-12 {
                return Err(ExperimentError::BadRecords(format!(
                    "{} seed {} stores θ {} but its ψ trace gives {again}",
                    r.model, r.seed, r.theta
                )));
            }
        }
        let keys: Vec<String> = self.keys.iter().map(|k| k.key.clone()).collect();
        Ok(SweepSummary {
            cells: build_report(self.kind, &keys, &self.spec.models(), records),
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::tiny_scenario;
    use crate::stream::{init_dataset, GeneratorConfig};

    fn tiny(kind: SweepKind) -> SweepSpec {
        SweepSpec {
            kind,
            base: tiny_scenario(),
            models: vec![ModelTag::SingleRandom, ModelTag::MultiRandom],
            rates: vec![0.01, 0.1],
            sizes: vec![200],
            growths: vec![1, 30],
            buckets: vec![0.1, 0.5],
            bucket_tolerance: 0.1,
            bucket_attempts: 300,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_cover_the_standard_grids() {
        let s = SweepSpec::default();
        assert_eq!(s.rates, vec![0.01, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2]);
        assert_eq!(s.models().len(), 5);
        assert_eq!(s.cases.len(), 4);
        let big = SweepSpec {
            kind: SweepKind::Size,
            sizes: vec![100_000],
            ..Default::default()
        };
        assert!(big.validate().is_err());
        assert!(SweepSpec { large_sizes: true, ..big }.validate().is_ok());
    }

    #[test]
    fn compare_sweep_shape_and_report_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec {
            cases: vec![DriftCase::Shift, DriftCase::Moving],
            ..tiny(SweepKind::Compare)
        };
        let out = run_sweep(&spec, Some(dir.path()), false).unwrap();
        assert_eq!(out.records.len(), 2 * 2 * 2);
        assert_eq!(out.summary.cells.len(), 2 * 2);
        let root = dir.path().join("compare");
        assert!(root.join("shift/0/stream.csv").exists());
        assert!(root.join("moving/1/multi_random.genome.json").exists());
        let csv_before = fs::read_to_string(root.join("report.csv")).unwrap();
        let records = read_records(&root).unwrap();
        let again = out.summary.recompute(&records).unwrap();
        assert_eq!(again, out.summary);
        write_report(&root, &again).unwrap();
        assert_eq!(fs::read_to_string(root.join("report.csv")).unwrap(), csv_before);
        assert!(matches!(
            run_sweep(&spec, Some(dir.path()), false),
            Err(ExperimentError::OutputExists(_))
        ));
    }

    #[test]
    fn rate_size_and_complexity_cells() {
        let s = tiny(SweepKind::DriftRate);
        let (cells, _) = s.cells().unwrap();
        assert_eq!(cells.len(), 2);
        let (a, b) = (cells[0].scenario.stream(1).unwrap(), cells[1].scenario.stream(1).unwrap());
        let topo = |st: &crate::stream::StreamState| {
            st.schedule().iter().map(|e| (e.start_time, e.duration, e.kind)).collect::<Vec<_>>()
        };
        assert_eq!(topo(&a), topo(&b));

        let out = run_sweep(&tiny(SweepKind::Size), None, false).unwrap();
        assert_eq!(out.summary.cells.len(), 2 * 2);
        assert!(out.records.iter().all(|r| r.psi.len() == 8));

        let c = tiny(SweepKind::Complexity);
        let seeds = c.bucket_seeds().unwrap();
        for (k, ss) in seeds.iter().enumerate() {
            for &s in ss {
                let cfg = GeneratorConfig { seed: s, ..c.base.generator.clone() };
                let score = complexity_score(init_dataset(&cfg).unwrap().data()).unwrap();
                assert!((score - c.buckets[k]).abs() <= c.bucket_tolerance);
            }
        }
    }

    #[test]
    fn relative_metric_matches_records() {
        let spec = SweepSpec {
            bucket_attempts: 200,
            ..tiny(SweepKind::Complexity)
        };
        let out = run_sweep(&spec, None, false).unwrap();
        for cell in out.summary.cells.iter().filter(|c| c.metric == "relative" && c.n > 0) {
            let vals: Vec<f64> = out
                .records
                .iter()
                .filter(|r| r.key == cell.key && r.model == cell.model)
                .filter_map(|r| (r.psi_train > 1e-9).then(|| r.theta / r.psi_train))
                .collect();
            assert!((mean(&vals) - cell.mean.unwrap()).abs() < 1e-12);
        }
        let gaps_ok = out.summary.cells.iter().all(|c| c.n > 0 || c.cell == "gap");
        assert!(gaps_ok);
    }
}
