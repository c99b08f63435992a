//! Three-stage search: the GA looks for a data partition only, every window
//! then gets its own pipeline search, and finally the stacker is searched on
//! the meta-dataset of the chosen members.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::detect::{DetectorSpec, DetectorState};
use crate::ensemble::{
    fit_rows, fitness, train_ensemble, EnsembleError, EnsembleGenome, FitnessConfig, GenePools,
    GlobalGene, MetaDataset, PipelineGene, TrainedEnsemble,
};
use crate::ga::{self, mutate_window, poisson_window, split_swap, GaConfig, GaError, GenerationRecord, GeneticProblem};
use crate::pipelines::{score_psi, FeatureEngineerSpec, ModelSpec, TunerSpec};
use crate::rng::{rng_from, Rng};
use crate::stats::{mean, std_dev};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivideError {
    #[error("partition stage: {0}")]
    Partition(GaError),
    #[error("subset stage: {0}")]
    Subset(EnsembleError),
    #[error("global stage: {0}")]
    Global(EnsembleError),
    #[error("invalid search budget: {0}")]
    InvalidBudget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchStrategy {
    Exhaustive,
    RandomSearch { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    #[serde(flatten)]
    pub strategy: SearchStrategy,
    /// Share of a window's rows held out to score candidates.
    pub validation_fraction: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            strategy: SearchStrategy::Exhaustive,
            validation_fraction: 0.2,
        }
    }
}

impl SearchBudget {
    pub fn random(trials: usize, seed: u64) -> Self {
        Self {
            strategy: SearchStrategy::RandomSearch { trials, seed },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DivideError> {
        if let SearchStrategy::RandomSearch { trials: 0, .. } = self.strategy {
            return Err(DivideError::InvalidBudget("trials must be ≥ 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(DivideError::InvalidBudget("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Indices into a candidate list of length `total`, in evaluation order.
    fn pick(&self, total: usize, salt: &[u64]) -> Vec<usize> {
        match self.strategy {
            SearchStrategy::Exhaustive => (0..total).collect(),
            SearchStrategy::RandomSearch { trials, seed } => {
                let mut idx: Vec<usize> = (0..total).collect();
                idx.shuffle(&mut rng_from(seed, salt));
                idx.truncate(trials.min(total));
                idx
            }
        }
    }
}

/// Counts pipeline fits made by candidate searches.
#[derive(Debug, Default)]
pub struct FitCounter(AtomicUsize);

impl FitCounter {
    pub fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

type Candidate = (FeatureEngineerSpec, ModelSpec, TunerSpec);

fn candidates(pools: &GenePools) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(pools.fe.len() * pools.models.len() * pools.tuners.len());
    for &fe in &pools.fe {
        for &m in &pools.models {
            for &t in &pools.tuners {
                out.push((fe, m, t));
            }
        }
    }
    out
}

/// Replays `errors` as they are, then again with a synthetic upward shift,
/// and picks the detector with the best detection-minus-false-alarm score.
/// Ties go to the earlier detection, then to pool order.
pub fn choose_detector(pool: &[DetectorSpec], errors: &[f64], steps: &[u32]) -> DetectorSpec {
    let fallback = pool.first().copied().unwrap_or_else(DetectorSpec::adwin);
    if errors.is_empty() || errors.len() != steps.len() {
        return fallback;
    }
    let shift = mean(errors) + 3.0 * std_dev(errors).max(1e-9);
    let base = steps[0];
    let offset = steps[steps.len() - 1] - base + 1;
    let mut best: Option<(i32, usize, usize)> = None;
    for (k, spec) in pool.iter().enumerate() {
        let Ok(mut det) = DetectorState::new(*spec) else {
            continue;
        };
        let mut false_alarm = false;
        let mut delay = None;
        for (&e, &s) in errors.iter().zip(steps) {
            if det.update(e, s).is_ok_and(|sig| sig.drift) {
                false_alarm = true;
            }
        }
        for (i, (&e, &s)) in errors.iter().zip(steps).enumerate() {
            if det.update(e + shift, s + offset).is_ok_and(|sig| sig.drift) && delay.is_none() {
                delay = Some(i);
            }
        }
        let score = i32::from(delay.is_some()) - i32::from(false_alarm);
        let key = (score, usize::MAX - delay.unwrap_or(errors.len()), usize::MAX - k);
        if best.is_none_or(|b| key > b) {
            best = Some(key);
        }
    }
    best.map_or(fallback, |(_, _, k)| pool[usize::MAX - k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub gene: PipelineGene,
    pub psi: f64,
    /// The window had too few rows; the gene is a placeholder.
    pub degenerate: bool,
}

struct Scored {
    psi: f64,
    errors: Vec<f64>,
    steps: Vec<u32>,
}

fn score_candidate(c: Candidate, data: &Dataset, rows: std::ops::Range<usize>, fraction: f64) -> Scored {
    let n_eval = ((rows.len() as f64) * fraction).round() as usize;
    let cut = rows.end - n_eval.min(rows.len());
    let tail = cut..rows.end;
    let fitted = (n_eval >= 2).then(|| fit_rows(c.0, c.1, c.2, data, rows.start..cut)).flatten();
    let pred = fitted.and_then(|p| p.predict(&data.features(tail.clone())).ok());
    match pred {
        Some(pred) => {
            let y = data.targets_in(tail.clone());
            Scored {
                psi: score_psi(&pred, y).unwrap_or(0.0),
                errors: pred.iter().zip(y).map(|(p, v)| (p - v).abs()).collect(),
                steps: data.steps()[tail].to_vec(),
            }
        }
        None => Scored {
            psi: 0.0,
            errors: Vec::new(),
            steps: Vec::new(),
        },
    }
}

/// Searches feature step × model × tuner for one window, scoring ψ on the
/// window's held-out tail, then picks the detector by replay.
pub fn per_subset_search(
    window: [u32; 2],
    data: &Dataset,
    pools: &GenePools,
    budget: &SearchBudget,
    counter: &FitCounter,
) -> SubsetResult {
    let all = candidates(pools);
    let rows = data.step_range(window[0], window[1].min(data.last_step()));
    let need = crate::pipelines::min_viable_rows(data.n_features());
    let n_fit = rows.len() - ((rows.len() as f64) * budget.validation_fraction).round() as usize;
    if n_fit < need || all.is_empty() {
        let (fe, model, tuner) = all.first().copied().unwrap_or((
            FeatureEngineerSpec::Identity,
            ModelSpec::LinearLeastSquares,
            TunerSpec::defaults(),
        ));
        return SubsetResult {
            gene: PipelineGene {
                fe,
                model,
                tuner,
                window,
                detector: DetectorSpec::adwin(),
            },
            psi: 0.0,
            degenerate: true,
        };
    }
    let picked = budget.pick(all.len(), &[u64::from(window[0]), u64::from(window[1])]);
    counter.add(picked.len());
    let scored: Vec<Scored> = picked
        .par_iter()
        .map(|&i| score_candidate(all[i], data, rows.clone(), budget.validation_fraction))
        .collect();
    let mut best = 0;
    for (i, s) in scored.iter().enumerate() {
        if s.psi > scored[best].psi {
            best = i;
        }
    }
    let (fe, model, tuner) = all[picked[best]];
    let detector = choose_detector(&pools.detectors, &scored[best].errors, &scored[best].steps);
    SubsetResult {
        gene: PipelineGene {
            fe,
            model,
            tuner,
            window,
            detector,
        },
        psi: scored[best].psi,
        degenerate: false,
    }
}

/// Windows only; pipelines are chosen later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionGenome {
    pub windows: Vec<[u32; 2]>,
}

pub fn proxy_gene(window: [u32; 2]) -> PipelineGene {
    PipelineGene {
        fe: FeatureEngineerSpec::Standardize,
        model: ModelSpec::Ridge { lambda: 1.0 },
        tuner: TunerSpec::defaults(),
        window,
        detector: DetectorSpec::adwin(),
    }
}

pub fn proxy_global() -> GlobalGene {
    GlobalGene {
        fe: FeatureEngineerSpec::Standardize,
        model: ModelSpec::Ridge { lambda: 1.0 },
        tuner: TunerSpec::defaults(),
        detector: DetectorSpec::adwin(),
    }
}

impl PartitionGenome {
    /// The ensemble every window gets under the fixed reference pipeline.
    pub fn proxy(&self) -> EnsembleGenome {
        EnsembleGenome {
            global: proxy_global(),
            members: self.windows.iter().map(|&w| proxy_gene(w)).collect(),
        }
    }
}

/// Partition search scored through the reference-pipeline ensemble.
pub struct PartitionProblem<'a> {
    pub cfg: GaConfig,
    pub fitness: FitnessConfig,
    /// Chance that a mutation adds or removes a window instead of moving one.
    pub add_remove: f64,
    pub now: &'a Dataset,
    pub future: &'a Dataset,
}

impl PartitionProblem<'_> {
    fn clock(&self) -> u32 {
        self.now.last_step()
    }
}

impl GeneticProblem for PartitionProblem<'_> {
    type Genome = PartitionGenome;

    fn random(&self, rng: &mut Rng) -> PartitionGenome {
        let n = rng.random_range(2..=self.cfg.n_max);
        let lambda = self.cfg.lambda_w_at(self.clock());
        PartitionGenome {
            windows: (0..n).map(|_| poisson_window(self.clock(), lambda, rng)).collect(),
        }
    }

    fn mutate(&self, g: &PartitionGenome, rng: &mut Rng) -> PartitionGenome {
        let mut out = g.clone();
        let n = out.windows.len();
        let can_add = n < self.cfg.n_max;
        let can_remove = n > 2;
        if (can_add || can_remove) && rng.random_bool(self.add_remove) {
            if can_add && (!can_remove || rng.random_bool(0.5)) {
                let lambda = self.cfg.lambda_w_at(self.clock());
                out.windows.push(poisson_window(self.clock(), lambda, rng));
            } else {
                let i = rng.random_range(0..n);
                out.windows.remove(i);
            }
            return out;
        }
        let i = rng.random_range(0..n);
        out.windows[i] = mutate_window(out.windows[i], &self.cfg, self.clock(), rng);
        out
    }

    fn crossover(&self, a: &PartitionGenome, b: &PartitionGenome, rng: &mut Rng) -> (PartitionGenome, PartitionGenome) {
        match split_swap(&a.windows, &b.windows, rng) {
            None => (a.clone(), b.clone()),
            Some((x, y)) => (PartitionGenome { windows: x }, PartitionGenome { windows: y }),
        }
    }

    fn fitness(&self, g: &PartitionGenome) -> f64 {
        fitness(&g.proxy(), self.now, self.future, &self.fitness).map_or(0.0, |r| r.fitness)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImprovedConfig {
    pub ga: GaConfig,
    pub fitness: FitnessConfig,
    pub budget: SearchBudget,
    pub add_remove: f64,
}

impl Default for ImprovedConfig {
    fn default() -> Self {
        Self {
            ga: GaConfig::default(),
            fitness: FitnessConfig::default(),
            budget: SearchBudget::default(),
            add_remove: 0.1,
        }
    }
}

pub fn search_partitions(
    cfg: &ImprovedConfig,
    now: &Dataset,
    future: &Dataset,
) -> Result<ga::GaRun<PartitionGenome>, DivideError> {
    let problem = PartitionProblem {
        cfg: cfg.ga.clone(),
        fitness: cfg.fitness,
        add_remove: cfg.add_remove,
        now,
        future,
    };
    ga::run(&problem, &cfg.ga).map_err(DivideError::Partition)
}

#[derive(Debug, Clone)]
pub struct ImprovedRun {
    pub genome: EnsembleGenome,
    pub ensemble: TrainedEnsemble,
    pub partition: PartitionGenome,
    /// Stage-1 trace; empty when the partition was supplied.
    pub trace: Vec<GenerationRecord>,
    pub subsets: Vec<SubsetResult>,
    pub global_psi: f64,
    pub fits: usize,
}

/// Stages 2 and 3 for a given partition.
pub fn assemble(
    partition: &PartitionGenome,
    cfg: &ImprovedConfig,
    pools: &GenePools,
    now: &Dataset,
) -> Result<ImprovedRun, DivideError> {
    cfg.budget.validate()?;
    let counter = FitCounter::default();
    let subsets: Vec<SubsetResult> = partition
        .windows
        .par_iter()
        .map(|&w| per_subset_search(w, now, pools, &cfg.budget, &counter))
        .collect();
    let members: Vec<PipelineGene> = subsets.iter().map(|s| s.gene.clone()).collect();
    let meta = MetaDataset::build(&members, now, &cfg.fitness).map_err(DivideError::Subset)?;

    let gp = pools.global();
    let all = candidates(&gp);
    let picked = cfg.budget.pick(all.len(), &[u64::MAX]);
    counter.add(picked.len());
    let detector = gp.detectors.first().copied().unwrap_or_else(DetectorSpec::adwin);
    let scored: Vec<Option<(f64, Vec<f64>)>> = picked
        .par_iter()
        .map(|&i| {
            let (fe, model, tuner) = all[i];
            meta.score(&GlobalGene {
                fe,
                model,
                tuner,
                detector,
            })
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, s) in scored.iter().enumerate() {
        if let Some((psi, _)) = s {
            if best.is_none_or(|b| *psi > scored[b].as_ref().map_or(f64::MIN, |x| x.0)) {
                best = Some(i);
            }
        }
    }
    let Some(b) = best else {
        return Err(DivideError::Global(EnsembleError::InvalidGenome(
            "no stacker candidate could be fitted".into(),
        )));
    };
    let (psi, errors) = scored[b].clone().expect("chosen candidate scored");
    let (fe, model, tuner) = all[picked[b]];
    let steps = &meta.steps[meta.split..];
    let global = GlobalGene {
        fe,
        model,
        tuner,
        detector: choose_detector(&gp.detectors, &errors, steps),
    };
    let genome = EnsembleGenome { global, members };
    let ensemble = train_ensemble(&genome, now, &cfg.fitness).map_err(DivideError::Global)?;
    Ok(ImprovedRun {
        genome,
        ensemble,
        partition: partition.clone(),
        trace: Vec::new(),
        subsets,
        global_psi: psi,
        fits: counter.get(),
    })
}

/// All three stages.
pub fn run_improved(
    cfg: &ImprovedConfig,
    pools: &GenePools,
    now: &Dataset,
    future: &Dataset,
) -> Result<ImprovedRun, DivideError> {
    cfg.budget.validate()?;
    let stage1 = search_partitions(cfg, now, future)?;
    let mut run = assemble(&stage1.best, cfg, pools, now)?;
    run.trace = stage1.trace;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::holdout_psi;
    use crate::stream::{init_dataset, GeneratorConfig};

    fn data(seed: u64, steps: u32) -> Dataset {
        let mut s = init_dataset(&GeneratorConfig::small(seed, 4)).unwrap();
        s.advance_to(steps).unwrap();
        s.data().clone()
    }

    fn linear(n: usize) -> Dataset {
        let mut d = Dataset::new(2);
        let mut rng = crate::rng::seeded(9);
        for i in 0..n {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            d.push(&x, 3.0 * x[0] - x[1] + 0.01 * rng.random::<f64>(), (i / 50) as u32);
        }
        d
    }

    #[test]
    fn exhaustive_counts_sixty_fits() {
        let d = data(1, 4);
        let c = FitCounter::default();
        let r = per_subset_search([0, 4], &d, &GenePools::standard(4), &SearchBudget::default(), &c);
        assert_eq!(c.get(), 60);
        assert!(!r.degenerate);
    }

    #[test]
    fn winner_dominates_linear_baseline() {
        let d = linear(400);
        let pools = GenePools::standard(2);
        let r = per_subset_search([0, 7], &d, &pools, &SearchBudget::default(), &FitCounter::default());
        let rows = d.step_range(0, 7);
        let base = holdout_psi(
            FeatureEngineerSpec::Identity,
            ModelSpec::LinearLeastSquares,
            TunerSpec::defaults(),
            &d,
            rows,
            0.2,
        );
        assert!(r.psi >= base);
        assert!(r.psi > 0.99);
    }

    #[test]
    fn random_search_is_deterministic() {
        let d = data(2, 4);
        let pools = GenePools::standard(4);
        let b = SearchBudget::random(10, 5);
        let c = FitCounter::default();
        let x = per_subset_search([1, 4], &d, &pools, &b, &c);
        let y = per_subset_search([1, 4], &d, &pools, &b, &c);
        assert_eq!(x, y);
        assert_eq!(c.get(), 20);
    }

    #[test]
    fn degenerate_window_gives_placeholder() {
        let d = linear(400);
        let c = FitCounter::default();
        let r = per_subset_search([3, 3], &d, &GenePools::standard(2), &SearchBudget::default(), &c);
        assert!(!r.degenerate);
        let mut tiny = Dataset::new(2);
        for i in 0..6 {
            tiny.push(&[i as f64, 1.0], i as f64, 0);
        }
        let r = per_subset_search([0, 0], &tiny, &GenePools::standard(2), &SearchBudget::default(), &c);
        assert!(r.degenerate);
    }

    #[test]
    fn detector_choice_prefers_quiet_then_sensitive() {
        let mut rng = crate::rng::seeded(3);
        let errors: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let steps: Vec<u32> = (0..300).map(|i| i / 30).collect();
        let chosen = choose_detector(&DetectorSpec::pool(), &errors, &steps);
        assert!(DetectorSpec::pool().contains(&chosen));
        assert_eq!(choose_detector(&[], &[], &[]), DetectorSpec::adwin());
    }

    #[test]
    fn fit_accounting_and_trivial_partition() {
        let d = data(3, 6);
        let pools = GenePools::standard(4);
        let part = PartitionGenome {
            windows: vec![[0, 6], [0, 6]],
        };
        let run = assemble(&part, &ImprovedConfig::default(), &pools, &d).unwrap();
        assert_eq!(run.fits, 2 * 60 + 48);
        assert_eq!(run.genome.members[0], run.genome.members[1]);
        assert_eq!(run.ensemble.meta_width(), 4);
    }

    #[test]
    fn partition_ops_respect_bounds() {
        let d = data(4, 12);
        let cfg = GaConfig { n_max: 4, ..Default::default() };
        let p = PartitionProblem {
            cfg: cfg.clone(),
            fitness: FitnessConfig::default(),
            add_remove: 0.5,
            now: &d,
            future: &d,
        };
        let mut rng = crate::rng::seeded(0);
        for _ in 0..500 {
            let a = p.random(&mut rng);
            let m = p.mutate(&a, &mut rng);
            assert!((2..=4).contains(&m.windows.len()));
            for w in &m.windows {
                assert!(w[0] <= w[1] && w[1] <= 12);
            }
        }
        let two = GaConfig { n_max: 2, ..cfg };
        let p2 = PartitionProblem { cfg: two, ..p };
        for _ in 0..100 {
            assert_eq!(p2.mutate(&p2.random(&mut rng), &mut rng).windows.len(), 2);
        }
    }
}
