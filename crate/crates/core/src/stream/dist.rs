//! Per-feature sampling distributions.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution as _, Exp, Geometric, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::StreamError;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Normal,
    Exponential,
    Binomial,
    Geometric,
    Benford,
    Uniform,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Normal,
        Family::Exponential,
        Family::Binomial,
        Family::Geometric,
        Family::Benford,
        Family::Uniform,
    ];

    pub fn is_discrete(self) -> bool {
        matches!(self, Family::Binomial | Family::Geometric | Family::Benford)
    }
}

/// Base distribution of a feature. `Geometric` counts failures before the
/// first success; `Benford` draws leading digits `1..=9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum Distribution {
    Normal { mean: f64, sd: f64 },
    Exponential { rate: f64 },
    Binomial { trials: u32, p: f64 },
    Geometric { p: f64 },
    Benford,
    Uniform { low: f64, high: f64 },
}

/// A feature's distribution plus a location offset. Drift events move the
/// offset (and, for user-supplied events, any parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    #[serde(flatten)]
    pub dist: Distribution,
    #[serde(default)]
    pub offset: f64,
}

const GEOMETRIC_TAIL: f64 = 1e-12;

impl FeatureSpec {
    pub fn new(dist: Distribution) -> Self {
        Self { dist, offset: 0.0 }
    }

    pub fn family(&self) -> Family {
        match self.dist {
            Distribution::Normal { .. } => Family::Normal,
            Distribution::Exponential { .. } => Family::Exponential,
            Distribution::Binomial { .. } => Family::Binomial,
            Distribution::Geometric { .. } => Family::Geometric,
            Distribution::Benford => Family::Benford,
            Distribution::Uniform { .. } => Family::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let ok = self.offset.is_finite()
            && match self.dist {
                Distribution::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
                Distribution::Exponential { rate } => rate > 0.0 && rate.is_finite(),
                Distribution::Binomial { trials, p } => trials >= 1 && (0.0..=1.0).contains(&p),
                Distribution::Geometric { p } => p > 0.0 && p <= 1.0,
                Distribution::Benford => true,
                Distribution::Uniform { low, high } => {
                    low.is_finite() && high.is_finite() && high > low
                }
            };
        if ok {
            Ok(())
        } else {
            Err(StreamError::InvalidFeatureSpec(format!("{self:?}")))
        }
    }

    /// Draws a spec of the given family with randomised parameters.
    pub fn random(family: Family, rng: &mut Rng) -> Self {
        let dist = match family {
            Family::Normal => Distribution::Normal {
                mean: rng.random_range(-5.0..5.0),
                sd: rng.random_range(0.5..3.0),
            },
            Family::Exponential => Distribution::Exponential {
                rate: rng.random_range(0.2..2.0),
            },
            Family::Binomial => Distribution::Binomial {
                trials: rng.random_range(1..=20),
                p: rng.random_range(0.1..0.9),
            },
            Family::Geometric => Distribution::Geometric {
                p: rng.random_range(0.1..0.9),
            },
            Family::Benford => Distribution::Benford,
            Family::Uniform => {
                let low = rng.random_range(-5.0..5.0);
                Distribution::Uniform {
                    low,
                    high: low + rng.random_range(0.5..10.0),
                }
            }
        };
        Self::new(dist)
    }

    pub fn random_from(families: &[Family], rng: &mut Rng) -> Self {
        let fam = *families.choose(rng).expect("non-empty family list");
        Self::random(fam, rng)
    }

    /// Draws `n` values.
    pub fn sample_n(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        let base: Vec<f64> = match self.dist {
            Distribution::Normal { mean, sd } => {
                let d = Normal::new(mean, sd).expect("validated");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Distribution::Exponential { rate } => {
                let d = Exp::new(rate).expect("validated");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Distribution::Binomial { trials, p } => {
                let d = Binomial::new(u64::from(trials), p).expect("validated");
                (0..n).map(|_| d.sample(rng) as f64).collect()
            }
            Distribution::Geometric { p } => {
                let d = Geometric::new(p).expect("validated");
                (0..n).map(|_| d.sample(rng) as f64).collect()
            }
            Distribution::Benford => (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    10f64.powf(u).floor().clamp(1.0, 9.0)
                })
                .collect(),
            Distribution::Uniform { low, high } => {
                (0..n).map(|_| rng.random_range(low..high)).collect()
            }
        };
        base.into_iter().map(|v| v + self.offset).collect()
    }

    /// Standard deviation of the base distribution.
    pub fn std_dev(&self) -> f64 {
        match self.dist {
            Distribution::Normal { sd, .. } => sd,
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::Binomial { trials, p } => (f64::from(trials) * p * (1.0 - p)).sqrt(),
            Distribution::Geometric { p } => (1.0 - p).sqrt() / p,
            Distribution::Benford => 2.4609,
            Distribution::Uniform { low, high } => (high - low) / 12f64.sqrt(),
        }
    }

    /// Cumulative distribution function, offset included.
    pub fn cdf(&self, x: f64) -> f64 {
        let z = x - self.offset;
        match self.dist {
            Distribution::Normal { mean, sd } => {
                0.5 * erfc(-(z - mean) / (sd * std::f64::consts::SQRT_2))
            }
            Distribution::Exponential { rate } => {
                if z <= 0.0 {
                    0.0
                } else {
                    1.0 - (-rate * z).exp()
                }
            }
            Distribution::Uniform { low, high } => ((z - low) / (high - low)).clamp(0.0, 1.0),
            _ => {
                if z < 0.0 {
                    return 0.0;
                }
                self.atoms()
                    .iter()
                    .take_while(|(a, _)| *a <= z)
                    .map(|(_, p)| p)
                    .sum::<f64>()
                    .min(1.0)
            }
        }
    }

    /// Support points and masses of a discrete base distribution.
    fn atoms(&self) -> Vec<(f64, f64)> {
        match self.dist {
            Distribution::Binomial { trials, p } => {
                let n = trials as usize;
                let mut out = Vec::with_capacity(n + 1);
                let q = 1.0 - p;
                let mut pmf = q.powi(trials as i32);
                for k in 0..=n {
                    if k > 0 {
                        pmf = if q == 0.0 {
                            if k == n { 1.0 } else { 0.0 }
                        } else {
                            pmf * (n - k + 1) as f64 / k as f64 * p / q
                        };
                    }
                    out.push((k as f64, pmf));
                }
                out
            }
            Distribution::Geometric { p } => {
                let mut out = Vec::new();
                let mut mass = p;
                let mut k = 0.0;
                let mut cum = 0.0;
                while cum < 1.0 - GEOMETRIC_TAIL && out.len() < 100_000 {
                    out.push((k, mass));
                    cum += mass;
                    mass *= 1.0 - p;
                    k += 1.0;
                }
                out
            }
            Distribution::Benford => (1..=9)
                .map(|d| (f64::from(d), (1.0 + 1.0 / f64::from(d)).log10()))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            dist: self.dist.clone(),
            offset: self.offset + delta,
        }
    }

    /// Population KS distance between this spec and itself shifted by `delta`.
    pub fn shift_distance(&self, delta: f64) -> f64 {
        let d = delta.abs();
        if d == 0.0 {
            return 0.0;
        }
        match self.dist {
            Distribution::Normal { sd, .. } => 1.0 - erfc(d / (2.0 * sd) / std::f64::consts::SQRT_2),
            Distribution::Exponential { rate } => 1.0 - (-rate * d).exp(),
            Distribution::Uniform { low, high } => (d / (high - low)).min(1.0),
            _ => {
                let base = FeatureSpec::new(self.dist.clone());
                let moved = base.shifted(d);
                base.atoms()
                    .iter()
                    .flat_map(|&(a, _)| [a, a + d])
                    .map(|x| (base.cdf(x) - moved.cdf(x)).abs())
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Smallest non-negative shift whose population KS distance reaches
    /// `target`. Discrete families move in whole lattice steps.
    pub fn displacement_for(&self, target: f64) -> f64 {
        let target = target.clamp(0.0, 0.999);
        if target == 0.0 {
            return 0.0;
        }
        if self.family().is_discrete() {
            let mut k = 1.0;
            while self.shift_distance(k) < target && k < 1e6 {
                k += 1.0;
            }
            return k;
        }
        let mut hi = self.std_dev().max(1e-9);
        while self.shift_distance(hi) < target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.shift_distance(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    /// Linear interpolation of parameters towards `to` (same family only).
    pub fn lerp(&self, to: &FeatureSpec, w: f64) -> Result<FeatureSpec, StreamError> {
        let l = |a: f64, b: f64| a + (b - a) * w;
        let dist = match (&self.dist, &to.dist) {
            (Distribution::Normal { mean: m0, sd: s0 }, Distribution::Normal { mean: m1, sd: s1 }) => {
                Distribution::Normal { mean: l(*m0, *m1), sd: l(*s0, *s1) }
            }
            (Distribution::Exponential { rate: r0 }, Distribution::Exponential { rate: r1 }) => {
                Distribution::Exponential { rate: l(*r0, *r1) }
            }
            (
                Distribution::Binomial { trials: n0, p: p0 },
                Distribution::Binomial { trials: n1, p: p1 },
            ) => Distribution::Binomial {
                trials: l(f64::from(*n0), f64::from(*n1)).round().max(1.0) as u32,
                p: l(*p0, *p1),
            },
            (Distribution::Geometric { p: p0 }, Distribution::Geometric { p: p1 }) => {
                Distribution::Geometric { p: l(*p0, *p1) }
            }
            (Distribution::Benford, Distribution::Benford) => Distribution::Benford,
            (
                Distribution::Uniform { low: a0, high: b0 },
                Distribution::Uniform { low: a1, high: b1 },
            ) => Distribution::Uniform { low: l(*a0, *a1), high: l(*b0, *b1) },
            _ => {
                return Err(StreamError::FamilyMismatch(self.family(), to.family()));
            }
        };
        Ok(FeatureSpec {
            dist,
            offset: l(self.offset, to.offset),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::stats::{ks_two_sample, mean};

    fn normal(mean: f64, sd: f64) -> FeatureSpec {
        FeatureSpec::new(Distribution::Normal { mean, sd })
    }

    #[test]
    fn validation() {
        assert!(normal(0.0, 1.0).validate().is_ok());
        assert!(normal(0.0, 0.0).validate().is_err());
        let bad = [
            Distribution::Exponential { rate: 0.0 },
            Distribution::Binomial { trials: 0, p: 0.5 },
            Distribution::Binomial { trials: 3, p: 1.5 },
            Distribution::Geometric { p: 0.0 },
            Distribution::Uniform { low: 1.0, high: 1.0 },
        ];
        for d in bad {
            assert!(FeatureSpec::new(d).validate().is_err());
        }
    }

    #[test]
    fn benford_frequencies() {
        let spec = FeatureSpec::new(Distribution::Benford);
        let mut rng = seeded(3);
        let xs = spec.sample_n(200_000, &mut rng);
        for d in 1..=9 {
            let freq = xs.iter().filter(|&&v| v == f64::from(d)).count() as f64 / xs.len() as f64;
            let p = (1.0 + 1.0 / f64::from(d)).log10();
            assert!((freq - p).abs() < 0.004, "digit {d}: {freq} vs {p}");
        }
    }

    #[test]
    fn cdf_matches_samples() {
        let mut rng = seeded(11);
        for fam in Family::ALL {
            let spec = FeatureSpec::random(fam, &mut rng).shifted(0.7);
            spec.validate().unwrap();
            let xs = spec.sample_n(20_000, &mut rng);
            let m = mean(&xs);
            let probe = m;
            let emp = xs.iter().filter(|&&v| v <= probe).count() as f64 / xs.len() as f64;
            assert!((emp - spec.cdf(probe)).abs() < 0.02, "{fam:?}: {emp} vs {}", spec.cdf(probe));
        }
    }

    #[test]
    fn shift_distance_is_monotone_and_invertible() {
        let mut rng = seeded(5);
        for fam in Family::ALL {
            let spec = FeatureSpec::random(fam, &mut rng);
            let mut last = 0.0;
            for k in 1..40 {
                let d = spec.shift_distance(k as f64 * 0.1 * spec.std_dev());
                assert!(d + 1e-12 >= last, "{fam:?} not monotone");
                last = d;
            }
            for target in [0.1, 0.3, 0.6] {
                let delta = spec.displacement_for(target);
                assert!(spec.shift_distance(delta) >= target - 1e-9);
                if !fam.is_discrete() {
                    assert!((spec.shift_distance(delta) - target).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn normal_shift_distance_matches_samples() {
        let spec = normal(0.0, 1.0);
        let delta = spec.displacement_for(0.4);
        let mut rng = seeded(9);
        let a = spec.sample_n(20_000, &mut rng);
        let b = spec.shifted(delta).sample_n(20_000, &mut rng);
        let ks = ks_two_sample(&a, &b).unwrap();
        assert!((ks.statistic - 0.4).abs() < 0.02);
    }

    #[test]
    fn lerp_endpoints() {
        let a = normal(0.0, 1.0);
        let b = normal(5.0, 2.0);
        assert_eq!(a.lerp(&b, 0.0).unwrap(), a);
        assert_eq!(a.lerp(&b, 1.0).unwrap(), b);
        assert_eq!(a.lerp(&b, 0.5).unwrap(), normal(2.5, 1.5));
        let u = FeatureSpec::new(Distribution::Benford);
        assert!(a.lerp(&u, 0.5).is_err());
    }
}
