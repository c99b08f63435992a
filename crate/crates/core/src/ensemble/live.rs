//! Training and the live predict-then-absorb loop.

use std::ops::Range;

use rayon::prelude::*;

use super::{
    fit_rows, holdout_psi, EnsembleError, EnsembleEvent, EnsembleGenome, EventKind, EventScope,
    FitnessConfig, GlobalGene, MemberFit, PipelineGene,
};
use crate::data::{Dataset, Matrix};
use crate::detect::{DetectorSpec, DetectorState};
use crate::pipelines::{fit_pipeline, score_psi, TrainedPipeline};
use crate::stats::mean;

/// A model that is fed the stream one step at a time.
pub trait LiveModel: Send {
    /// Predicts the rows that arrived at `step` (already appended to `data`),
    /// then observes their targets and retrains whatever signalled drift.
    fn on_new_batch(&mut self, data: &Dataset, step: u32) -> Result<Vec<f64>, EnsembleError>;
    fn events(&self) -> &[EnsembleEvent];
    /// ψ measured on held-out data when the model was trained.
    fn psi_train(&self) -> f64;
}

#[derive(Debug, Clone)]
struct LiveMember {
    gene: PipelineGene,
    fit: MemberFit,
    detector: DetectorState,
}

#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    genome: EnsembleGenome,
    members: Vec<LiveMember>,
    global: TrainedPipeline,
    global_detector: DetectorState,
    fallback: Vec<bool>,
    n_features: usize,
    eval_fraction: f64,
    psi_now: f64,
    events: Vec<EnsembleEvent>,
}

/// Rows `[a, b]` of the window clipped to the snapshot.
fn window_rows(data: &Dataset, [a, b]: [u32; 2]) -> Range<usize> {
    data.step_range(a, b.min(data.last_step()))
}

/// Out-of-sample stand-in for a member when scoring on rows from `eval_start`:
/// the part of its window before `eval_start`, or, when that is too small,
/// the same number of rows immediately before `eval_start`.
fn oos_rows(data: &Dataset, window: Range<usize>, eval_start: usize) -> Range<usize> {
    let clipped = window.start.min(eval_start)..window.end.min(eval_start);
    let need = crate::pipelines::min_viable_rows(data.n_features());
    if clipped.len() >= need {
        return clipped;
    }
    let len = window.len().max(need);
    eval_start.saturating_sub(len)..eval_start
}

/// Step-batched meta rows over `rows`: for every member its prediction and
/// its detector's confidence at the start of the step. The detectors are
/// advanced with the members' absolute errors.
fn meta_rows(
    fits: &[MemberFit],
    detectors: &mut [DetectorState],
    data: &Dataset,
    rows: Range<usize>,
) -> Result<Matrix, EnsembleError> {
    let n = fits.len();
    let mut out = Vec::with_capacity(rows.len() * 2 * n);
    let steps = data.steps();
    let mut i = rows.start;
    while i < rows.end {
        let s = steps[i];
        let mut j = i;
        while j < rows.end && steps[j] == s {
            j += 1;
        }
        let x = data.features(i..j);
        let y = data.targets_in(i..j);
        let preds: Vec<Vec<f64>> = fits.iter().map(|f| f.predict(&x)).collect::<Result<_, _>>()?;
        let conf: Vec<f64> = detectors.iter().map(DetectorState::confidence).collect();
        for r in 0..(j - i) {
            for k in 0..n {
                out.push(preds[k][r]);
                out.push(conf[k]);
            }
        }
        for (k, d) in detectors.iter_mut().enumerate() {
            for r in 0..(j - i) {
                d.update((preds[k][r] - y[r]).abs(), s)?;
            }
        }
        i = j;
    }
    Ok(Matrix::new(rows.len(), 2 * n, out))
}

fn fit_global(gene: &GlobalGene, meta: &Matrix, y: &[f64]) -> Result<TrainedPipeline, EnsembleError> {
    fit_pipeline(gene.fe, gene.model, gene.tuner, meta, y).map_err(EnsembleError::GlobalFit)
}

fn fresh_detectors(specs: impl Iterator<Item = DetectorSpec>) -> Result<Vec<DetectorState>, EnsembleError> {
    Ok(specs.map(DetectorState::new).collect::<Result<_, _>>()?)
}

struct StackInputs {
    /// Per member: the deployment fit on its window and the out-of-sample fit.
    fits: Vec<(Option<TrainedPipeline>, Option<TrainedPipeline>)>,
    detectors: Vec<DetectorState>,
    meta: Matrix,
    e_start: usize,
    pre_mean: f64,
}

fn stack_inputs(members: &[PipelineGene], data: &Dataset, cfg: &FitnessConfig) -> Result<StackInputs, EnsembleError> {
    cfg.validate()?;
    let n_rows = data.len();
    let n_eval = (((n_rows as f64) * cfg.eval_fraction).round() as usize).clamp(4, n_rows);
    let e_start = n_rows - n_eval;
    let pre_mean = mean(data.targets_in(0..e_start.max(1).min(n_rows)));

    let fits: Vec<(Option<TrainedPipeline>, Option<TrainedPipeline>)> = members
        .par_iter()
        .map(|g| {
            let w = window_rows(data, g.window);
            let deploy = fit_rows(g.fe, g.model, g.tuner, data, w.clone());
            let oos = fit_rows(g.fe, g.model, g.tuner, data, oos_rows(data, w, e_start));
            (deploy, oos)
        })
        .collect();
    if fits.iter().all(|(d, _)| d.is_none()) {
        return Err(EnsembleError::AllMembersDegenerate);
    }
    let oos_fits: Vec<MemberFit> = fits
        .iter()
        .map(|(d, o)| match (o, d) {
            (Some(p), _) | (None, Some(p)) => MemberFit::Pipeline(Box::new(p.clone())),
            (None, None) => MemberFit::Constant(pre_mean),
        })
        .collect();
    let mut detectors = fresh_detectors(members.iter().map(|g| g.detector))?;
    let meta = meta_rows(&oos_fits, &mut detectors, data, e_start..n_rows)?;
    Ok(StackInputs {
        fits,
        detectors,
        meta,
        e_start,
        pre_mean,
    })
}

/// The stacker's training data for a fixed member set: out-of-sample member
/// predictions and detector confidences over the evaluation slice.
#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub steps: Vec<u32>,
    /// Rows before `split` fit the stacker; the rest score it.
    pub split: usize,
}

impl MetaDataset {
    pub fn build(members: &[PipelineGene], data: &Dataset, cfg: &FitnessConfig) -> Result<Self, EnsembleError> {
        let inputs = stack_inputs(members, data, cfg)?;
        let rows = inputs.e_start..data.len();
        Ok(Self {
            split: rows.len() / 2,
            y: data.targets_in(rows.clone()).to_vec(),
            steps: data.steps()[rows].to_vec(),
            x: inputs.meta,
        })
    }

    /// ψ of a stacker fitted before `split` and scored after it, with the
    /// absolute errors on the scored rows; `None` when the fit fails.
    pub fn score(&self, gene: &GlobalGene) -> Option<(f64, Vec<f64>)> {
        let n = self.x.rows();
        let p = fit_global(gene, &self.x.slice_rows(0..self.split), &self.y[..self.split]).ok()?;
        let pred = p.predict(&self.x.slice_rows(self.split..n)).ok()?;
        let psi = score_psi(&pred, &self.y[self.split..]).unwrap_or(0.0);
        let err = pred.iter().zip(&self.y[self.split..]).map(|(p, v)| (p - v).abs()).collect();
        Some((psi, err))
    }
}

/// Fits every member on its window and the stacker on the most recent rows.
///
/// The stacker learns from out-of-sample member predictions on the first half
/// of the evaluation slice and is scored on the second half; that score is
/// ψ(M, D(t)). It is then refit on the whole slice for deployment.
pub fn train_ensemble(
    genome: &EnsembleGenome,
    data: &Dataset,
    cfg: &FitnessConfig,
) -> Result<TrainedEnsemble, EnsembleError> {
    let t = data.last_step();
    genome.validate(genome.n(), t)?;
    let StackInputs {
        fits,
        detectors,
        meta,
        e_start,
        pre_mean,
    } = stack_inputs(&genome.members, data, cfg)?;
    let n_eval = data.len() - e_start;
    let split = n_eval / 2;
    let y = data.targets_in(e_start..data.len());
    let probe = fit_global(&genome.global, &meta.slice_rows(0..split), &y[..split])?;
    let tail = meta.slice_rows(split..n_eval);
    let tail_pred = probe.predict(&tail)?;
    let psi_now = score_psi(&tail_pred, &y[split..]).unwrap_or(0.0);
    let global_detector = DetectorState::new(genome.global.detector)?;
    let global = fit_global(&genome.global, &meta, y)?;

    let mut fallback = Vec::with_capacity(genome.n());
    let members = genome
        .members
        .iter()
        .zip(fits)
        .zip(detectors)
        .map(|((g, (deploy, _)), detector)| {
            let fit = match deploy {
                Some(p) => MemberFit::Pipeline(Box::new(p)),
                None => {
                    let w = window_rows(data, g.window);
                    let c = if w.is_empty() { pre_mean } else { mean(data.targets_in(w)) };
                    MemberFit::Constant(c)
                }
            };
            fallback.push(fit.is_constant());
            LiveMember {
                gene: g.clone(),
                fit,
                detector,
            }
        })
        .collect();
    Ok(TrainedEnsemble {
        genome: genome.clone(),
        members,
        global,
        global_detector,
        fallback,
        n_features: data.n_features(),
        eval_fraction: cfg.eval_fraction,
        psi_now,
        events: Vec::new(),
    })
}

impl TrainedEnsemble {
    pub fn genome(&self) -> &EnsembleGenome {
        &self.genome
    }

    /// Members whose window could not be trained on and predict a constant.
    pub fn fallback_flags(&self) -> &[bool] {
        &self.fallback
    }

    pub fn global(&self) -> &TrainedPipeline {
        &self.global
    }

    /// Current member windows (they slide when members retrain).
    pub fn member_windows(&self) -> Vec<[u32; 2]> {
        self.members.iter().map(|m| m.gene.window).collect()
    }

    pub fn meta_width(&self) -> usize {
        2 * self.members.len()
    }

    /// Meta rows for `x` with the detectors' current confidences.
    pub fn meta_features(&self, x: &Matrix) -> Result<Matrix, EnsembleError> {
        if !x.is_empty() && x.cols() != self.n_features {
            return Err(EnsembleError::SchemaMismatch {
                expected: self.n_features,
                got: x.cols(),
            });
        }
        let preds: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.fit.predict(x))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(x.rows() * self.meta_width());
        for r in 0..x.rows() {
            for (k, m) in self.members.iter().enumerate() {
                out.push(preds[k][r]);
                out.push(m.detector.confidence());
            }
        }
        Ok(Matrix::new(x.rows(), self.meta_width(), out))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, EnsembleError> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let meta = self.meta_features(x)?;
        Ok(self.global.predict(&meta)?)
    }

    fn refit_global(&mut self, data: &Dataset, step: u32) -> Result<bool, EnsembleError> {
        let n = data.len_until(step);
        let n_eval = ((n as f64) * self.eval_fraction).round() as usize;
        let rows = n - n_eval.min(n)..n;
        let fits: Vec<MemberFit> = self.members.iter().map(|m| m.fit.clone()).collect();
        let mut dets = fresh_detectors(self.members.iter().map(|m| m.gene.detector))?;
        let meta = meta_rows(&fits, &mut dets, data, rows.clone())?;
        match fit_global(&self.genome.global, &meta, data.targets_in(rows)) {
            Ok(g) => {
                self.global = g;
                Ok(true)
            }
            Err(_) => Ok(false),
        }
    }
}

/// Window of a member retrained at step `s`: the same length, ending at `s`.
fn retrain_window([a, b]: [u32; 2], s: u32) -> [u32; 2] {
    let len = b - a;
    [a.max(s.saturating_sub(len)), s]
}

impl LiveModel for TrainedEnsemble {
    fn on_new_batch(&mut self, data: &Dataset, step: u32) -> Result<Vec<f64>, EnsembleError> {
        let rows = data.step_range(step, step);
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = data.features(rows.clone());
        let y = data.targets_in(rows.clone()).to_vec();
        let meta = self.meta_features(&x)?;
        let out = self.global.predict(&meta)?;

        for k in 0..self.members.len() {
            let mut signal = None;
            for (r, &v) in y.iter().enumerate() {
                let err = (meta.get(r, 2 * k) - v).abs();
                let s = self.members[k].detector.update(err, step)?;
                if s.drift {
                    self.events.push(EnsembleEvent {
                        step,
                        scope: EventScope::Member(k),
                        kind: EventKind::Signal,
                        confidence: s.confidence,
                    });
                    signal.get_or_insert(s.confidence);
                }
            }
            if let Some(conf) = signal {
                let m = &mut self.members[k];
                let w = retrain_window(m.gene.window, step);
                if let Some(p) = fit_rows(m.gene.fe, m.gene.model, m.gene.tuner, data, window_rows(data, w)) {
                    m.fit = MemberFit::Pipeline(Box::new(p));
                    m.gene.window = w;
                    self.fallback[k] = false;
                    self.events.push(EnsembleEvent {
                        step,
                        scope: EventScope::Member(k),
                        kind: EventKind::Retrain,
                        confidence: conf,
                    });
                }
                m.detector.reset();
            }
        }

        let mut global_signal = None;
        for (p, v) in out.iter().zip(&y) {
            let s = self.global_detector.update((p - v).abs(), step)?;
            if s.drift {
                self.events.push(EnsembleEvent {
                    step,
                    scope: EventScope::Global,
                    kind: EventKind::Signal,
                    confidence: s.confidence,
                });
                global_signal.get_or_insert(s.confidence);
            }
        }
        if let Some(conf) = global_signal {
            if self.refit_global(data, step)? {
                self.events.push(EnsembleEvent {
                    step,
                    scope: EventScope::Global,
                    kind: EventKind::Retrain,
                    confidence: conf,
                });
            }
            self.global_detector.reset();
        }
        Ok(out)
    }

    fn events(&self) -> &[EnsembleEvent] {
        &self.events
    }

    fn psi_train(&self) -> f64 {
        self.psi_now
    }
}

/// One pipeline with its detector and the same retraining policy as an
/// ensemble member.
#[derive(Debug, Clone)]
pub struct SingleModel {
    gene: PipelineGene,
    pipeline: TrainedPipeline,
    detector: DetectorState,
    psi_now: f64,
    events: Vec<EnsembleEvent>,
}

/// Fits `gene` on its window; ψ is measured by refitting on the window minus
/// its most recent `eval_fraction` share and scoring that share.
pub fn train_single(gene: &PipelineGene, data: &Dataset, eval_fraction: f64) -> Result<SingleModel, EnsembleError> {
    let w = window_rows(data, gene.window);
    let pipeline = fit_rows(gene.fe, gene.model, gene.tuner, data, w.clone())
        .ok_or(EnsembleError::AllMembersDegenerate)?;
    let psi_now = holdout_psi(gene.fe, gene.model, gene.tuner, data, w, eval_fraction);
    Ok(SingleModel {
        gene: gene.clone(),
        pipeline,
        detector: DetectorState::new(gene.detector)?,
        psi_now,
        events: Vec::new(),
    })
}

impl SingleModel {
    pub fn gene(&self) -> &PipelineGene {
        &self.gene
    }
}

impl LiveModel for SingleModel {
    fn on_new_batch(&mut self, data: &Dataset, step: u32) -> Result<Vec<f64>, EnsembleError> {
        let rows = data.step_range(step, step);
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let pred = self.pipeline.predict(&data.features(rows.clone()))?;
        let mut signal = None;
        for (p, v) in pred.iter().zip(data.targets_in(rows)) {
            let s = self.detector.update((p - v).abs(), step)?;
            if s.drift {
                self.events.push(EnsembleEvent {
                    step,
                    scope: EventScope::Member(0),
                    kind: EventKind::Signal,
                    confidence: s.confidence,
                });
                signal.get_or_insert(s.confidence);
            }
        }
        if let Some(conf) = signal {
            let w = retrain_window(self.gene.window, step);
            let g = &self.gene;
            if let Some(p) = fit_rows(g.fe, g.model, g.tuner, data, window_rows(data, w)) {
                self.pipeline = p;
                self.gene.window = w;
                self.events.push(EnsembleEvent {
                    step,
                    scope: EventScope::Member(0),
                    kind: EventKind::Retrain,
                    confidence: conf,
                });
            }
            self.detector.reset();
        }
        Ok(pred)
    }

    fn events(&self) -> &[EnsembleEvent] {
        &self.events
    }

    fn psi_train(&self) -> f64 {
        self.psi_now
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::GenePools;
    use crate::pipelines::{FeatureEngineerSpec, ModelSpec, TunerSpec};
    use crate::stream::{init_dataset, GeneratorConfig};

    fn stream(seed: u64, steps: u32) -> Dataset {
        let mut s = init_dataset(&GeneratorConfig {
            samples: [400, 400],
            features: [4, 4],
            growth: 50,
            seed,
            ..Default::default()
        })
        .unwrap();
        s.advance_to(steps).unwrap();
        s.data().clone()
    }

    fn gene(window: [u32; 2]) -> PipelineGene {
        PipelineGene {
            fe: FeatureEngineerSpec::Standardize,
            model: ModelSpec::Ridge { lambda: 1.0 },
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
    fn trains_with_meta_width_2n_and_fallbacks() {
        let data = stream(1, 6);
        let g = EnsembleGenome {
            global: linear_global(),
            members: vec![gene([0, 6]), gene([6, 6]), gene([3, 3])],
        };
        let e = train_ensemble(&g, &data, &FitnessConfig::default()).unwrap();
        assert_eq!(e.meta_width(), 6);
        assert_eq!(e.meta_features(&data.features(0..5)).unwrap().cols(), 6);
        assert_eq!(e.fallback_flags(), &[false, false, false]);
        assert!(e.predict(&Matrix::zeros(0, 4)).unwrap().is_empty());
        assert!(matches!(
            e.predict(&Matrix::zeros(3, 5)),
            Err(EnsembleError::SchemaMismatch { .. })
        ));
        let x = data.features(0..20);
        assert_eq!(e.predict(&x).unwrap(), e.predict(&x).unwrap());
    }

    #[test]
    fn degenerate_members_flag_or_fail() {
        let data = stream(2, 3);
        let g = EnsembleGenome {
            global: linear_global(),
            members: vec![gene([0, 3]), gene([2, 2])],
        };
        let mut sparse = Dataset::new(4);
        for i in 0..data.len() {
            let s = if i < data.len() - 3 { 0 } else { 1 };
            sparse.push(data.row(i), data.targets()[i], s);
        }
        let g2 = EnsembleGenome {
            global: linear_global(),
            members: vec![gene([0, 1]), gene([1, 1])],
        };
        let e = train_ensemble(&g2, &sparse, &FitnessConfig::default()).unwrap();
        assert_eq!(e.fallback_flags(), &[false, true]);
        let g3 = EnsembleGenome {
            global: linear_global(),
            members: vec![gene([1, 1]), gene([1, 1])],
        };
        assert!(matches!(
            train_ensemble(&g3, &sparse, &FitnessConfig::default()),
            Err(EnsembleError::AllMembersDegenerate)
        ));
        assert!(train_ensemble(&g, &data, &FitnessConfig::default()).is_ok());
    }

    #[test]
    fn live_loop_and_empty_batches() {
        let data = stream(3, 12);
        let now = data.snapshot(6);
        let pools = GenePools::standard(4);
        let mut rng = crate::rng::seeded(3);
        let g = EnsembleGenome {
            global: pools.random_global(&mut rng),
            members: vec![pools.random_member([0, 6], &mut rng), pools.random_member([4, 6], &mut rng)],
        };
        let mut e = train_ensemble(&g, &now, &FitnessConfig::default()).unwrap();
        let before = e.member_windows();
        assert!(e.on_new_batch(&data, 40).unwrap().is_empty());
        assert_eq!(e.member_windows(), before);
        for s in 7..=12 {
            assert_eq!(e.on_new_batch(&data, s).unwrap().len(), 50);
        }
    }

    #[test]
    fn retrain_window_slides() {
        assert_eq!(retrain_window([3, 8], 20), [15, 20]);
        assert_eq!(retrain_window([3, 8], 6), [3, 6]);
        assert_eq!(retrain_window([0, 0], 9), [9, 9]);
    }
}
