//! Genes, genomes and the component pools they are drawn from.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::EnsembleError;
use crate::detect::DetectorSpec;
use crate::pipelines::{Distance, FeatureEngineerSpec, ModelSpec, TunerSpec};
use crate::rng::Rng;

/// One inner member: pipeline choices, training window in steps, detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineGene {
    pub fe: FeatureEngineerSpec,
    pub model: ModelSpec,
    pub tuner: TunerSpec,
    pub window: [u32; 2],
    pub detector: DetectorSpec,
}

/// The stacker. Its training data is always the meta-dataset built over
/// the whole snapshot, so it carries no window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalGene {
    pub fe: FeatureEngineerSpec,
    pub model: ModelSpec,
    pub tuner: TunerSpec,
    pub detector: DetectorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleGenome {
    pub global: GlobalGene,
    pub members: Vec<PipelineGene>,
}

impl EnsembleGenome {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn validate(&self, n_max: usize, clock: u32) -> Result<(), EnsembleError> {
        if self.members.len() < 2 || self.members.len() > n_max.max(2) {
            return Err(EnsembleError::InvalidGenome(format!(
                "{} members outside [2, {n_max}]",
                self.members.len()
            )));
        }
        for (i, m) in self.members.iter().enumerate() {
            let [a, b] = m.window;
            if a > b || b > clock {
                return Err(EnsembleError::InvalidGenome(format!(
                    "member {i} window [{a}, {b}] not inside [0, {clock}]"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Moves every member window `by` steps later, except windows that start
    /// at step 0, whose start stays put so they keep covering the history.
    pub fn shifted(&self, by: u32) -> Self {
        let mut g = self.clone();
        for m in &mut g.members {
            let [a, b] = m.window;
            m.window = [if a == 0 { 0 } else { a + by }, b + by];
        }
        g
    }
}

/// Candidate component values for random genes and mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePools {
    pub fe: Vec<FeatureEngineerSpec>,
    pub models: Vec<ModelSpec>,
    pub tuners: Vec<TunerSpec>,
    pub detectors: Vec<DetectorSpec>,
}

impl GenePools {
    /// Five feature steps, four models, three tuners and twelve detectors.
    pub fn standard(n_features: usize) -> Self {
        Self {
            fe: vec![
                FeatureEngineerSpec::Identity,
                FeatureEngineerSpec::Standardize,
                FeatureEngineerSpec::MinMax,
                FeatureEngineerSpec::PolynomialDeg2,
                FeatureEngineerSpec::TopKCorrelationSelect {
                    k: n_features.div_ceil(2).max(1),
                },
            ],
            models: vec![
                ModelSpec::LinearLeastSquares,
                ModelSpec::Ridge { lambda: 1.0 },
                ModelSpec::RegressionTree {
                    max_depth: 6,
                    min_leaf: 5,
                },
                ModelSpec::Knn {
                    k: 5,
                    distance: Distance::L2,
                },
            ],
            tuners: vec![TunerSpec::defaults(), TunerSpec::grid(), TunerSpec::random(8, 0)],
            detectors: DetectorSpec::pool(),
        }
    }

    /// Pools for the stacker; top-k selection is sized for `2n` meta columns
    /// at fit time, so it is left out.
    pub fn global(&self) -> Self {
        Self {
            fe: self
                .fe
                .iter()
                .copied()
                .filter(|f| !matches!(f, FeatureEngineerSpec::TopKCorrelationSelect { .. }))
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.fe.is_empty() || self.models.is_empty() || self.tuners.is_empty() || self.detectors.is_empty() {
            return Err(EnsembleError::InvalidGenome("empty component pool".into()));
        }
        Ok(())
    }

    pub fn random_member(&self, window: [u32; 2], rng: &mut Rng) -> PipelineGene {
        PipelineGene {
            fe: *self.fe.choose(rng).expect("non-empty pool"),
            model: *self.models.choose(rng).expect("non-empty pool"),
            tuner: *self.tuners.choose(rng).expect("non-empty pool"),
            window,
            detector: *self.detectors.choose(rng).expect("non-empty pool"),
        }
    }

    pub fn random_global(&self, rng: &mut Rng) -> GlobalGene {
        let g = self.global();
        GlobalGene {
            fe: *g.fe.choose(rng).expect("non-empty pool"),
            model: *g.models.choose(rng).expect("non-empty pool"),
            tuner: *g.tuners.choose(rng).expect("non-empty pool"),
            detector: *g.detectors.choose(rng).expect("non-empty pool"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_field_names() {
        let pools = GenePools::standard(6);
        let mut rng = crate::rng::seeded(1);
        let g = EnsembleGenome {
            global: pools.random_global(&mut rng),
            members: vec![pools.random_member([1, 4], &mut rng), pools.random_member([0, 4], &mut rng)],
        };
        let text = g.to_json().unwrap();
        for key in ["global", "members", "fe", "model", "tuner", "window", "detector"] {
            assert!(text.contains(&format!("\"{key}\"")), "{key}");
        }
        assert_eq!(EnsembleGenome::from_json(&text).unwrap(), g);
        g.validate(8, 4).unwrap();
        assert!(g.validate(8, 3).is_err());
        let s = g.shifted(10);
        assert_eq!(s.members[0].window, [11, 14]);
        assert_eq!(s.members[1].window, [0, 14]);
    }

    #[test]
    fn pool_sizes() {
        let p = GenePools::standard(5);
        assert_eq!((p.fe.len(), p.models.len(), p.tuners.len(), p.detectors.len()), (5, 4, 3, 12));
        assert_eq!(p.global().fe.len(), 4);
        assert!(matches!(p.fe[4], FeatureEngineerSpec::TopKCorrelationSelect { k: 3 }));
    }
}
