//! Genetic search: mutate, pair-and-crossover, evaluate, select, keep the
//! best genome ever seen. The engine is generic over a [`GeneticProblem`];
//! [`EnsembleProblem`] searches two-level ensemble genomes.

mod ops;

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from, Rng};

pub use ops::{
    crossover_pair, init_population, mutate_genome, mutate_window, poisson_window, split_swap,
    EnsembleProblem,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaError {
    #[error("invalid GA config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub pop_size: usize,
    pub generations: usize,
    /// Mutation probability per genome.
    pub xi: f64,
    /// Probability that a mutation targets the global gene.
    pub zeta: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Royalty share passed to the next generation unchanged.
    pub alpha: f64,
    pub n_max: usize,
    /// Poisson mean of window offsets; `None` means a quarter of the clock.
    pub lambda_w: Option<f64>,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            pop_size: 24,
            generations: 15,
            xi: 0.3,
            zeta: 0.2,
            mu: 5.0,
            sigma: 2.0,
            alpha: 0.25,
            n_max: 8,
            lambda_w: None,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let bad = |m: String| Err(GaError::InvalidConfig(m));
        if self.pop_size < 2 || self.pop_size % 2 != 0 {
            return bad(format!("pop_size {} must be even and ≥ 2", self.pop_size));
        }
        if self.generations < 1 {
            return bad("generations must be ≥ 1".into());
        }
        if self.n_max < 2 {
            return bad("n_max must be ≥ 2".into());
        }
        for (name, v) in [("xi", self.xi), ("zeta", self.zeta), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name}={v} outside [0, 1]"));
            }
        }
        if !(self.mu > 0.0 && self.sigma > 0.0) {
            return bad("mu and sigma must be positive".into());
        }
        if let Some(l) = self.lambda_w {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda_w={l} must be finite and ≥ 0"));
            }
        }
        Ok(())
    }

    pub fn lambda_w_at(&self, clock: u32) -> f64 {
        self.lambda_w.unwrap_or(0.25 * f64::from(clock))
    }
}

/// A search space with variation operators and a deterministic fitness.
pub trait GeneticProblem: Sync {
    type Genome: Clone + Send + Sync + Serialize;

    fn random(&self, rng: &mut Rng) -> Self::Genome;
    /// Applies one mutation (the ξ gate is handled by the engine).
    fn mutate(&self, genome: &Self::Genome, rng: &mut Rng) -> Self::Genome;
    fn crossover(&self, a: &Self::Genome, b: &Self::Genome, rng: &mut Rng) -> (Self::Genome, Self::Genome);
    fn fitness(&self, genome: &Self::Genome) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Best fitness seen up to and including this generation.
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub generation_best: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaRun<G> {
    /// Generation 0 is the initial population.
    pub trace: Vec<GenerationRecord>,
    pub best: G,
    pub best_fitness: f64,
    pub seed: u64,
    /// Distinct genomes whose fitness was computed.
    pub evaluations: usize,
}

impl<G> GaRun<G> {
    pub fn initial_best(&self) -> f64 {
        self.trace.first().map_or(0.0, |r| r.best_fitness)
    }
}

const INIT: u64 = 1;
const MUTATE: u64 = 2;
const PAIR: u64 = 3;
const CROSS: u64 = 4;
const SELECT: u64 = 5;

struct Memo {
    cache: HashMap<String, f64>,
}

impl Memo {
    /// Scores a population, reusing fitness values of genomes seen before.
    fn evaluate<P: GeneticProblem>(&mut self, problem: &P, pop: &[P::Genome]) -> Vec<f64> {
        let keys: Vec<String> = pop
            .iter()
            .map(|g| serde_json::to_string(g).expect("genomes serialize"))
            .collect();
        let mut todo: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if !self.cache.contains_key(k) && !todo.iter().any(|&j| keys[j] == *k) {
                todo.push(i);
            }
        }
        let scores: Vec<f64> = todo.par_iter().map(|&i| sanitize(problem.fitness(&pop[i]))).collect();
        for (&i, s) in todo.iter().zip(scores) {
            self.cache.insert(keys[i].clone(), s);
        }
        keys.iter().map(|k| self.cache[k]).collect()
    }
}

fn sanitize(f: f64) -> f64 {
    if f.is_finite() {
        f
    } else {
        0.0
    }
}

/// Royalty-tournament selection. The best `⌈αP⌉` indices (ties to the lower
/// index) are kept; the remaining slots are drawn with replacement with
/// probability proportional to fitness (negative values count as 0; an
/// all-zero population is sampled uniformly).
pub fn select(fitness: &[f64], alpha: f64, rng: &mut Rng) -> Vec<usize> {
    let p = fitness.len();
    let royal = ((alpha * p as f64).ceil() as usize).min(p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order[..royal].to_vec();
    let weights: Vec<f64> = fitness.iter().map(|&f| f.max(0.0)).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => out.extend((royal..p).map(|_| dist.sample(rng))),
        Err(_) => out.extend((royal..p).map(|_| rng.random_range(0..p))),
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the search. Every random decision draws from a stream derived from
/// `(seed, stage, generation, index)`, so results do not depend on the number
/// of worker threads.
pub fn run<P: GeneticProblem>(problem: &P, cfg: &GaConfig) -> Result<GaRun<P::Genome>, GaError> {
    cfg.validate()?;
    let p = cfg.pop_size;
    let mut memo = Memo {
        cache: HashMap::new(),
    };
    let mut pop: Vec<P::Genome> = (0..p)
        .map(|i| problem.random(&mut rng_from(cfg.seed, &[INIT, i as u64])))
        .collect();
    let fit = memo.evaluate(problem, &pop);
    let b = argmax(&fit);
    let mut best = pop[b].clone();
    let mut best_fitness = fit[b];
    let mut trace = vec![GenerationRecord {
        generation: 0,
        best_fitness,
        mean_fitness: crate::stats::mean(&fit),
        generation_best: fit[b],
    }];

    for gen in 1..=cfg.generations {
        let g = gen as u64;
        for (i, genome) in pop.iter_mut().enumerate() {
            let mut rng = rng_from(cfg.seed, &[MUTATE, g, i as u64]);
            if rng.random_bool(cfg.xi) {
                *genome = problem.mutate(genome, &mut rng);
            }
        }
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[PAIR, g]));
        for (k, pair) in order.chunks_exact(2).enumerate() {
            let mut rng = rng_from(cfg.seed, &[CROSS, g, k as u64]);
            let (x, y) = problem.crossover(&pop[pair[0]], &pop[pair[1]], &mut rng);
            pop[pair[0]] = x;
            pop[pair[1]] = y;
        }
        let fit = memo.evaluate(problem, &pop);
        let b = argmax(&fit);
        if fit[b] > best_fitness {
            best_fitness = fit[b];
            best = pop[b].clone();
        }
        trace.push(GenerationRecord {
            generation: gen,
            best_fitness,
            mean_fitness: crate::stats::mean(&fit),
            generation_best: fit[b],
        });
        let chosen = select(&fit, cfg.alpha, &mut rng_from(cfg.seed, &[SELECT, g]));
        pop = chosen.into_iter().map(|i| pop[i].clone()).collect();
    }
    Ok(GaRun {
        trace,
        best,
        best_fitness,
        seed: cfg.seed,
        evaluations: memo.cache.len(),
    })
}

/// Writes `generation,best_fitness,mean_fitness`, prefixed by a `stage`
/// column when one is given.
pub fn write_trace_csv<W: std::io::Write>(
    trace: &[GenerationRecord],
    stage: Option<&str>,
    w: W,
) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["generation", "best_fitness", "mean_fitness"];
    if stage.is_some() {
        header.insert(0, "stage");
    }
    out.write_record(&header)?;
    for r in trace {
        let mut rec = vec![
            r.generation.to_string(),
            r.best_fitness.to_string(),
            r.mean_fitness.to_string(),
        ];
        if let Some(s) = stage {
            rec.insert(0, s.to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
