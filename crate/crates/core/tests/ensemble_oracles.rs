//! Stacker and live-loop behaviour on streams with a known concept.

use driftforge::data::Dataset;
use driftforge::detect::DetectorSpec;
use driftforge::ensemble::{
    train_ensemble, EnsembleGenome, EventKind, EventScope, FitnessConfig, GlobalGene, LiveModel, MetaDataset,
    PipelineGene,
};
use driftforge::pipelines::{score_psi, FeatureEngineerSpec, FittedModel, ModelSpec, TunerSpec};
use driftforge::rng::seeded;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

const PER_STEP: usize = 100;

/// `y = x·β + ε` with `ε ~ N(0, 0.1)`; from `shift_at` on, `y` moves by +5.
/// Step 0 holds `4·PER_STEP` rows.
fn stream(seed: u64, steps: u32, shift_at: Option<u32>) -> Dataset {
    let mut rng = seeded(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let beta = [1.5, -1.0, 0.5];
    let mut d = Dataset::new(3);
    for s in 0..=steps {
        let n = if s == 0 { 4 * PER_STEP } else { PER_STEP };
        let offset = if shift_at.is_some_and(|a| s >= a) { 5.0 } else { 0.0 };
        for _ in 0..n {
            let row: Vec<f64> = (0..3).map(|_| unit.sample(&mut rng)).collect();
            let y: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
                + offset
                + 0.1 * unit.sample(&mut rng);
            d.push(&row, y, s);
        }
    }
    d
}

fn gene(model: ModelSpec, window: [u32; 2]) -> PipelineGene {
    PipelineGene {
        fe: FeatureEngineerSpec::Identity,
        model,
        tuner: TunerSpec::defaults(),
        window,
        detector: DetectorSpec::adwin(),
    }
}

fn linear_global() -> GlobalGene {
    GlobalGene {
        fe: FeatureEngineerSpec::Identity,
        model: ModelSpec::LinearLeastSquares,
        tuner: TunerSpec::defaults(),
        detector: DetectorSpec::adwin(),
    }
}

#[test]
fn linear_stacker_matches_or_beats_a_duplicated_member() {
    for seed in 0..5 {
        let data = stream(seed, 10, None);
        let member = gene(ModelSpec::Knn { k: 7, distance: driftforge::pipelines::Distance::L2 }, [0, 10]);
        let members = vec![member.clone(), member];
        let meta = MetaDataset::build(&members, &data, &FitnessConfig::default()).unwrap();
        let member_pred = meta.x.column(0);
        let member_psi = score_psi(&member_pred, &meta.y).unwrap();
        // The stacker can reproduce the member with weight 1 and intercept 0,
        // so least squares over the same rows cannot do worse.
        let stacker = driftforge::pipelines::fit_pipeline(
            FeatureEngineerSpec::Identity,
            ModelSpec::LinearLeastSquares,
            TunerSpec::defaults(),
            &meta.x,
            &meta.y,
        )
        .unwrap();
        let stacked_psi = score_psi(&stacker.predict(&meta.x).unwrap(), &meta.y).unwrap();
        assert!(stacked_psi >= member_psi - 1e-9, "seed {seed}: {stacked_psi} < {member_psi}");
    }
}

#[test]
fn stacker_weights_the_accurate_member() {
    // Member 0 sees the live concept; member 1 is trained on rows whose
    // targets were replaced by noise, so its predictions carry no signal.
    let clean = stream(3, 10, None);
    let mut rng = seeded(99);
    let mut data = Dataset::new(3);
    for i in 0..clean.len() {
        let s = clean.steps()[i];
        let y = if s <= 1 { rng.random_range(-3.0..3.0) } else { clean.targets()[i] };
        data.push(clean.row(i), y, s);
    }
    let genome = EnsembleGenome {
        global: linear_global(),
        members: vec![gene(ModelSpec::LinearLeastSquares, [2, 10]), gene(ModelSpec::LinearLeastSquares, [0, 1])],
    };
    let e = train_ensemble(&genome, &data, &FitnessConfig::default()).unwrap();
    let FittedModel::Linear { coef, .. } = &e.global().model else {
        panic!("linear stacker expected");
    };
    assert_eq!(coef.len(), 4);
    assert!(coef[0].abs() > coef[2].abs(), "weights {coef:?}");
    assert!((coef[0] - 1.0).abs() < 0.1, "weights {coef:?}");
}

/// Ridge keeps the stacker off the near-constant confidence columns.
fn live_ensemble(seed: u64, data: &Dataset, t: u32) -> driftforge::ensemble::TrainedEnsemble {
    let genome = EnsembleGenome {
        global: GlobalGene {
            model: ModelSpec::Ridge { lambda: 1.0 },
            ..linear_global()
        },
        members: vec![
            gene(ModelSpec::LinearLeastSquares, [0, t]),
            gene(ModelSpec::Ridge { lambda: 1.0 }, [t.saturating_sub(3 + (seed % 3) as u32), t]),
        ],
    };
    train_ensemble(&genome, &data.snapshot(t), &FitnessConfig::default()).unwrap()
}

#[test]
fn stationary_streams_rarely_retrain() {
    let (t, end) = (10, 20);
    let quiet = (0..100u64)
        .filter(|&seed| {
            let data = stream(seed, end, None);
            let mut e = live_ensemble(seed, &data, t);
            for s in t + 1..=end {
                e.on_new_batch(&data, s).unwrap();
            }
            !e.events().iter().any(|ev| ev.kind == EventKind::Retrain)
        })
        .count();
    assert!(quiet >= 95, "{quiet} of 100 runs without a retrain");
}

#[test]
fn an_injected_shift_triggers_a_member_retrain() {
    let (t, shift, end) = (10, 14, 20);
    let hits = (0..100u64)
        .filter(|&seed| {
            let data = stream(1000 + seed, end, Some(shift));
            let mut e = live_ensemble(seed, &data, t);
            for s in t + 1..=end {
                e.on_new_batch(&data, s).unwrap();
            }
            e.events().iter().any(|ev| {
                ev.kind == EventKind::Retrain
                    && matches!(ev.scope, EventScope::Member(_))
                    && (shift..shift + 3).contains(&ev.step)
            })
        })
        .count();
    assert!(hits >= 90, "{hits} of 100 runs retrained a member within 3 steps");
}

#[test]
fn empty_batch_changes_nothing() {
    let data = stream(4, 12, None);
    let mut e = live_ensemble(0, &data, 10);
    let before = format!("{:?}", e.events());
    let trimmed = data.snapshot(11);
    // Step 12 has no rows in the snapshot.
    assert!(e.on_new_batch(&trimmed, 12).unwrap().is_empty());
    assert_eq!(format!("{:?}", e.events()), before);
}
