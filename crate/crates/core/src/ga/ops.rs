//! Variation operators over ensemble genomes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution as _, Normal, Poisson};

use super::{GaConfig, GeneticProblem};
use crate::data::Dataset;
use crate::ensemble::{fitness, EnsembleGenome, FitnessConfig, GenePools};
use crate::rng::{rng_from, Rng};

/// A window `[t − o₁, t − o₂]` (reordered) with Poisson(λ) offsets clamped at 0.
pub fn poisson_window(clock: u32, lambda: f64, rng: &mut Rng) -> [u32; 2] {
    let mut draw = || -> u32 {
        if lambda <= 0.0 {
            return 0;
        }
        let o: f64 = Poisson::new(lambda).expect("positive mean").sample(rng);
        (o as u64).min(u64::from(clock)) as u32
    };
    let a = clock - draw();
    let b = clock - draw();
    [a.min(b), a.max(b)]
}

fn random_genome(pools: &GenePools, cfg: &GaConfig, clock: u32, rng: &mut Rng) -> EnsembleGenome {
    let n = rng.random_range(2..=cfg.n_max);
    let lambda = cfg.lambda_w_at(clock);
    let members = (0..n)
        .map(|_| {
            let w = poisson_window(clock, lambda, rng);
            pools.random_member(w, rng)
        })
        .collect();
    EnsembleGenome {
        global: pools.random_global(rng),
        members,
    }
}

/// The initial population, one derived random stream per individual.
pub fn init_population(pools: &GenePools, cfg: &GaConfig, clock: u32) -> Vec<EnsembleGenome> {
    (0..cfg.pop_size)
        .map(|i| random_genome(pools, cfg, clock, &mut rng_from(cfg.seed, &[1, i as u64])))
        .collect()
}

/// Draws from `pool` excluding `current`; `None` when nothing else exists.
fn resample<T: Copy + PartialEq>(pool: &[T], current: &T, rng: &mut Rng) -> Option<T> {
    let others: Vec<T> = pool.iter().copied().filter(|v| v != current).collect();
    others.choose(rng).copied()
}

/// Moves the start or the end (equal odds) by `±round(N(μ, σ))`, clamps to
/// `[0, clock]` and reorders the endpoints.
pub fn mutate_window(window: [u32; 2], cfg: &GaConfig, clock: u32, rng: &mut Rng) -> [u32; 2] {
    let step = Normal::new(cfg.mu, cfg.sigma).expect("positive sigma").sample(rng).round();
    let delta = if rng.random_bool(0.5) { step } else { -step };
    let end = usize::from(rng.random_bool(0.5));
    let mut w = window;
    w[end] = (f64::from(w[end]) + delta).clamp(0.0, f64::from(clock)) as u32;
    [w[0].min(w[1]), w[0].max(w[1])]
}

#[derive(Clone, Copy)]
enum Component {
    Fe,
    Model,
    Tuner,
    Detector,
    Window,
}

/// Changes one component of one gene. The global gene is picked with
/// probability `ζ`. Components whose pool offers no alternative are skipped;
/// windows move one end by `±round(N(μ, σ))` inside `[0, clock]`.
pub fn mutate_genome(
    g: &EnsembleGenome,
    pools: &GenePools,
    cfg: &GaConfig,
    clock: u32,
    rng: &mut Rng,
) -> EnsembleGenome {
    let mut out = g.clone();
    let global = rng.random_bool(cfg.zeta) || out.members.is_empty();
    let mut comps = vec![Component::Fe, Component::Model, Component::Tuner, Component::Detector];
    if !global {
        comps.push(Component::Window);
    }
    comps.shuffle(rng);
    if global {
        let gp = pools.global();
        let gene = &mut out.global;
        for c in comps {
            let done = match c {
                Component::Fe => resample(&gp.fe, &gene.fe, rng).map(|v| gene.fe = v),
                Component::Model => resample(&gp.models, &gene.model, rng).map(|v| gene.model = v),
                Component::Tuner => resample(&gp.tuners, &gene.tuner, rng).map(|v| gene.tuner = v),
                Component::Detector => {
                    resample(&gp.detectors, &gene.detector, rng).map(|v| gene.detector = v)
                }
                Component::Window => None,
            };
            if done.is_some() {
                break;
            }
        }
        return out;
    }
    let i = rng.random_range(0..out.members.len());
    let gene = &mut out.members[i];
    for c in comps {
        let done = match c {
            Component::Fe => resample(&pools.fe, &gene.fe, rng).map(|v| gene.fe = v),
            Component::Model => resample(&pools.models, &gene.model, rng).map(|v| gene.model = v),
            Component::Tuner => resample(&pools.tuners, &gene.tuner, rng).map(|v| gene.tuner = v),
            Component::Detector => {
                resample(&pools.detectors, &gene.detector, rng).map(|v| gene.detector = v)
            }
            Component::Window => {
                gene.window = mutate_window(gene.window, cfg, clock, rng);
                Some(())
            }
        };
        if done.is_some() {
            break;
        }
    }
    out
}

/// Splits `a` and `b` into random subsets of a common size
/// `s ∈ [2, min(|a|, |b|) − 1]` and their complements, and returns
/// `(a_s ∪ b_rest, b_s ∪ a_rest)`. `None` when no such `s` exists.
pub fn split_swap<T: Clone>(a: &[T], b: &[T], rng: &mut Rng) -> Option<(Vec<T>, Vec<T>)> {
    let small = a.len().min(b.len());
    if small <= 2 {
        return None;
    }
    let s = rng.random_range(2..small);
    let mut split = |len: usize| {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        let (mut chosen, mut rest) = (idx[..s].to_vec(), idx[s..].to_vec());
        chosen.sort_unstable();
        rest.sort_unstable();
        (chosen, rest)
    };
    let (a_s, a_rest) = split(a.len());
    let (b_s, b_rest) = split(b.len());
    let join = |x: &[T], take: &[usize], y: &[T], keep: &[usize]| -> Vec<T> {
        take.iter()
            .map(|&i| x[i].clone())
            .chain(keep.iter().map(|&i| y[i].clone()))
            .collect()
    };
    Some((join(a, &a_s, b, &b_rest), join(b, &b_s, a, &a_rest)))
}

/// Member crossover. The child built from `a`'s subset keeps `a`'s global
/// gene. Pairs where either parent has at most two members pass through.
pub fn crossover_pair(a: &EnsembleGenome, b: &EnsembleGenome, rng: &mut Rng) -> (EnsembleGenome, EnsembleGenome) {
    match split_swap(&a.members, &b.members, rng) {
        None => (a.clone(), b.clone()),
        Some((x, y)) => (
            EnsembleGenome {
                global: a.global.clone(),
                members: x,
            },
            EnsembleGenome {
                global: b.global.clone(),
                members: y,
            },
        ),
    }
}

/// Ensemble search at clock `now.last_step()`, scored against `future`.
pub struct EnsembleProblem<'a> {
    pub pools: GenePools,
    pub cfg: GaConfig,
    pub fitness: FitnessConfig,
    pub now: &'a Dataset,
    pub future: &'a Dataset,
}

impl EnsembleProblem<'_> {
    pub fn clock(&self) -> u32 {
        self.now.last_step()
    }
}

impl GeneticProblem for EnsembleProblem<'_> {
    type Genome = EnsembleGenome;

    fn random(&self, rng: &mut Rng) -> EnsembleGenome {
        random_genome(&self.pools, &self.cfg, self.clock(), rng)
    }

    fn mutate(&self, g: &EnsembleGenome, rng: &mut Rng) -> EnsembleGenome {
        mutate_genome(g, &self.pools, &self.cfg, self.clock(), rng)
    }

    fn crossover(&self, a: &EnsembleGenome, b: &EnsembleGenome, rng: &mut Rng) -> (EnsembleGenome, EnsembleGenome) {
        crossover_pair(a, b, rng)
    }

    fn fitness(&self, g: &EnsembleGenome) -> f64 {
        fitness(g, self.now, self.future, &self.fitness).map_or(0.0, |r| r.fitness)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::PipelineGene;
    use proptest::prelude::*;

    fn pools() -> GenePools {
        GenePools::standard(4)
    }

    fn genome(n: usize, seed: u64) -> EnsembleGenome {
        let cfg = GaConfig { n_max: 8, ..Default::default() };
        let mut rng = crate::rng::seeded(seed);
        let mut g = random_genome(&pools(), &cfg, 40, &mut rng);
        while g.n() < n {
            g.members.push(pools().random_member([0, 40], &mut rng));
        }
        g.members.truncate(n);
        g
    }

    fn key(m: &PipelineGene) -> String {
        serde_json::to_string(m).unwrap()
    }

    #[test]
    fn windows_stay_near_the_clock() {
        let mut rng = crate::rng::seeded(4);
        for _ in 0..200 {
            let [a, b] = poisson_window(40, 10.0, &mut rng);
            assert!(a <= b && b <= 40);
        }
        assert_eq!(poisson_window(0, 0.0, &mut rng), [0, 0]);
        assert_eq!(poisson_window(5, 0.0, &mut rng), [5, 5]);
    }

    #[test]
    fn population_respects_bounds() {
        let cfg = GaConfig { pop_size: 30, n_max: 5, ..Default::default() };
        let pop = init_population(&pools(), &cfg, 20);
        assert_eq!(pop.len(), 30);
        for g in &pop {
            g.validate(5, 20).unwrap();
        }
        assert_eq!(pop, init_population(&pools(), &cfg, 20));
    }

    #[test]
    fn small_parents_pass_through() {
        let mut rng = crate::rng::seeded(0);
        let a = genome(2, 1);
        let b = genome(6, 2);
        assert_eq!(crossover_pair(&a, &b, &mut rng), (a, b));
    }

    proptest! {
        #[test]
        fn crossover_conserves_members(na in 2usize..9, nb in 2usize..9, seed in 0u64..500) {
            let a = genome(na, seed);
            let b = genome(nb, seed + 1000);
            let (x, y) = crossover_pair(&a, &b, &mut crate::rng::seeded(seed));
            prop_assert!(x.n() <= 8 && y.n() <= 8);
            prop_assert_eq!(x.n() + y.n(), na + nb);
            let mut before: Vec<String> = a.members.iter().chain(&b.members).map(key).collect();
            let mut after: Vec<String> = x.members.iter().chain(&y.members).map(key).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
            let globals = [&x.global, &y.global];
            prop_assert!(globals.contains(&&a.global) && globals.contains(&&b.global));
        }

        #[test]
        fn mutation_touches_one_component(n in 2usize..9, seed in 0u64..500, zeta in 0.0f64..1.0) {
            let cfg = GaConfig { zeta, ..Default::default() };
            let g = genome(n, seed);
            let m = mutate_genome(&g, &pools(), &cfg, 40, &mut crate::rng::seeded(seed));
            m.validate(8, 40).unwrap();
            prop_assert_eq!(m.n(), g.n());
            let mut changed = 0;
            let gg = (&g.global, &m.global);
            changed += usize::from(gg.0.fe != gg.1.fe) + usize::from(gg.0.model != gg.1.model)
                + usize::from(gg.0.tuner != gg.1.tuner) + usize::from(gg.0.detector != gg.1.detector);
            for (p, q) in g.members.iter().zip(&m.members) {
                changed += usize::from(p.fe != q.fe) + usize::from(p.model != q.model)
                    + usize::from(p.tuner != q.tuner) + usize::from(p.detector != q.detector)
                    + usize::from(p.window != q.window);
            }
            prop_assert!(changed <= 1);
        }
    }

    #[test]
    fn singleton_pools_leave_genome_alone() {
        let mut p = pools();
        p.fe.truncate(1);
        p.models.truncate(1);
        p.tuners.truncate(1);
        p.detectors.truncate(1);
        let mut rng = crate::rng::seeded(3);
        let mut g = genome(3, 3);
        g.global = p.random_global(&mut rng);
        g.members = (0..3).map(|_| p.random_member([5, 9], &mut rng)).collect();
        let cfg = GaConfig { zeta: 1.0, ..Default::default() };
        assert_eq!(mutate_genome(&g, &p, &cfg, 40, &mut rng), g);
    }
}
