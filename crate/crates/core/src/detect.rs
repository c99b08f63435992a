//! Streaming drift detectors over a scalar sequence (absolute prediction
//! errors, in practice). Every detector reports a binary signal and a
//! confidence in `[0, 1]`; after a signal it rebaselines on its own.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::ks_two_sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("non-finite detector input")]
    NonFinite,
    #[error("step {got} precedes the previous step {last}")]
    StepWentBack { last: u32, got: u32 },
    #[error("invalid detector spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DetectorSpec {
    AdwinError { delta: f64 },
    PageHinkley { delta: f64, lambda: f64, alpha: f64 },
    KsWindow { ref_size: usize, cur_size: usize, p_threshold: f64 },
    ErrorRateWindow { window: usize, z_threshold: f64 },
}

impl DetectorSpec {
    pub fn adwin() -> Self {
        Self::AdwinError { delta: 0.002 }
    }

    pub fn page_hinkley() -> Self {
        Self::PageHinkley {
            delta: 0.005,
            lambda: 50.0,
            alpha: 0.999,
        }
    }

    pub fn ks_window() -> Self {
        Self::KsWindow {
            ref_size: 200,
            cur_size: 200,
            p_threshold: 0.001,
        }
    }

    pub fn error_rate() -> Self {
        Self::ErrorRateWindow {
            window: 300,
            z_threshold: 3.0,
        }
    }

    /// Four kinds with three parameterizations each.
    pub fn pool() -> Vec<DetectorSpec> {
        let mut v = Vec::with_capacity(12);
        for delta in [0.0002, 0.002, 0.02] {
            v.push(Self::AdwinError { delta });
        }
        for lambda in [25.0, 50.0, 100.0] {
            v.push(Self::PageHinkley {
                delta: 0.005,
                lambda,
                alpha: 0.999,
            });
        }
        for (size, p) in [(100, 1e-3), (200, 1e-3), (400, 1e-4)] {
            v.push(Self::KsWindow {
                ref_size: size,
                cur_size: size,
                p_threshold: p,
            });
        }
        for (window, z) in [(100, 3.0), (300, 3.0), (300, 4.0)] {
            v.push(Self::ErrorRateWindow {
                window,
                z_threshold: z,
            });
        }
        v
    }

    pub fn name(&self) -> String {
        match *self {
            Self::AdwinError { delta } => format!("adwin({delta})"),
            Self::PageHinkley { lambda, .. } => format!("ph({lambda})"),
            Self::KsWindow {
                ref_size,
                p_threshold,
                ..
            } => format!("ks({ref_size},{p_threshold})"),
            Self::ErrorRateWindow {
                window,
                z_threshold,
            } => format!("err({window},{z_threshold})"),
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        let ok = match *self {
            Self::AdwinError { delta } => unit(delta),
            Self::PageHinkley {
                delta,
                lambda,
                alpha,
            } => delta >= 0.0 && lambda > 0.0 && alpha > 0.0 && alpha <= 1.0,
            Self::KsWindow {
                ref_size,
                cur_size,
                p_threshold,
            } => ref_size >= 10 && cur_size >= 10 && unit(p_threshold),
            Self::ErrorRateWindow {
                window,
                z_threshold,
            } => window >= 10 && z_threshold > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(DetectError::InvalidSpec(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub drift: bool,
    pub confidence: f64,
    pub at_step: u32,
}

/// Exponential-histogram bucket; `min`/`max` keep the window range exact
/// enough after prefix drops.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Bucket {
    count: u64,
    sum: f64,
    min: f64,
    max: f64,
}

const ADWIN_MAX_BUCKETS: usize = 5;
const ADWIN_MIN_SIDE: u64 = 5;
const PH_GRACE: u64 = 30;

#[derive(Debug, Clone, PartialEq)]
enum Inner {
    Adwin {
        buckets: VecDeque<Bucket>,
    },
    PageHinkley {
        n: u64,
        mean: f64,
        m2: f64,
        cum: f64,
        min_cum: f64,
    },
    Ks {
        reference: Vec<f64>,
        current: VecDeque<f64>,
    },
    ErrorRate {
        reference: Vec<f64>,
        current: VecDeque<f64>,
        current_sum: f64,
    },
}

impl Inner {
    fn fresh(spec: &DetectorSpec) -> Self {
        match spec {
            DetectorSpec::AdwinError { .. } => Inner::Adwin {
                buckets: VecDeque::new(),
            },
            DetectorSpec::PageHinkley { .. } => Inner::PageHinkley {
                n: 0,
                mean: 0.0,
                m2: 0.0,
                cum: 0.0,
                min_cum: 0.0,
            },
            DetectorSpec::KsWindow { .. } => Inner::Ks {
                reference: Vec::new(),
                current: VecDeque::new(),
            },
            DetectorSpec::ErrorRateWindow { .. } => Inner::ErrorRate {
                reference: Vec::new(),
                current: VecDeque::new(),
                current_sum: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    spec: DetectorSpec,
    inner: Inner,
    last_signal: Option<Signal>,
    last_step: Option<u32>,
    confidence: f64,
}

impl DetectorState {
    pub fn new(spec: DetectorSpec) -> Result<Self, DetectError> {
        spec.validate()?;
        Ok(Self {
            inner: Inner::fresh(&spec),
            spec,
            last_signal: None,
            last_step: None,
            confidence: 0.0,
        })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn last_signal(&self) -> Option<Signal> {
        self.last_signal
    }

    /// Confidence after the latest observation (0 before any).
    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn reset(&mut self) {
        self.inner = Inner::fresh(&self.spec);
        self.last_signal = None;
        self.last_step = None;
        self.confidence = 0.0;
    }

    /// Number of observations the detector currently holds.
    pub fn window_len(&self) -> usize {
        match &self.inner {
            Inner::Adwin { buckets } => buckets.iter().map(|b| b.count as usize).sum(),
            Inner::PageHinkley { n, .. } => *n as usize,
            Inner::Ks { reference, current } | Inner::ErrorRate { reference, current, .. } => {
                reference.len() + current.len()
            }
        }
    }

    pub fn update(&mut self, value: f64, step: u32) -> Result<Signal, DetectError> {
        if !value.is_finite() {
            return Err(DetectError::NonFinite);
        }
        if let Some(last) = self.last_step {
            if step < last {
                return Err(DetectError::StepWentBack { last, got: step });
            }
        }
        self.last_step = Some(step);
        let (drift, confidence) = match (&mut self.inner, self.spec) {
            (Inner::Adwin { buckets }, DetectorSpec::AdwinError { delta }) => {
                adwin_update(buckets, value, delta)
            }
            (
                Inner::PageHinkley {
                    n,
                    mean,
                    m2,
                    cum,
                    min_cum,
                },
                DetectorSpec::PageHinkley {
                    delta,
                    lambda,
                    alpha,
                },
            ) => {
                let mut out = (false, 0.0);
                if *n >= PH_GRACE {
                    let sd = (*m2 / *n as f64).sqrt();
                    let z = if sd > 1e-12 { (value - *mean) / sd } else { 0.0 };
                    *cum = alpha * *cum + (z - delta);
                    *min_cum = min_cum.min(*cum);
                    let ph = *cum - *min_cum;
                    out = (ph > lambda, (ph / lambda).min(1.0));
                }
                *n += 1;
                let d = value - *mean;
                *mean += d / *n as f64;
                *m2 += d * (value - *mean);
                out
            }
            (
                Inner::Ks { reference, current },
                DetectorSpec::KsWindow {
                    ref_size,
                    cur_size,
                    p_threshold,
                },
            ) => {
                if reference.len() < ref_size {
                    reference.push(value);
                    (false, 0.0)
                } else {
                    current.push_back(value);
                    if current.len() > cur_size {
                        current.pop_front();
                    }
                    if current.len() < cur_size {
                        (false, 0.0)
                    } else {
                        let cur: Vec<f64> = current.iter().copied().collect();
                        let p = ks_two_sample(reference, &cur).map_or(1.0, |r| r.p_value);
                        let drift = p < p_threshold;
                        if drift {
                            *reference = cur;
                            current.clear();
                        }
                        (drift, 1.0 - p)
                    }
                }
            }
            (
                Inner::ErrorRate {
                    reference,
                    current,
                    current_sum,
                },
                DetectorSpec::ErrorRateWindow {
                    window,
                    z_threshold,
                },
            ) => {
                if reference.len() < window {
                    reference.push(value);
                    (false, 0.0)
                } else {
                    current.push_back(value);
                    *current_sum += value;
                    if current.len() > window {
                        *current_sum -= current.pop_front().unwrap_or(0.0);
                    }
                    if current.len() < window {
                        (false, 0.0)
                    } else {
                        let n = reference.len() as f64;
                        let mr = reference.iter().sum::<f64>() / n;
                        let sr = (reference.iter().map(|v| (v - mr).powi(2)).sum::<f64>() / n).sqrt();
                        let mc = *current_sum / current.len() as f64;
                        let gap = mc - mr;
                        let tol = 1e-12 * (1.0 + mr.abs());
                        let z = if gap <= tol {
                            0.0
                        } else if sr > tol {
                            gap / (sr / (current.len() as f64).sqrt())
                        } else {
                            f64::INFINITY
                        };
                        let drift = z > z_threshold;
                        if drift {
                            *reference = current.drain(..).collect();
                            *current_sum = 0.0;
                        }
                        (drift, (z / z_threshold).min(1.0))
                    }
                }
            }
            _ => unreachable!("inner state always matches the detector kind"),
        };
        self.confidence = confidence;
        let signal = Signal {
            drift,
            confidence,
            at_step: step,
        };
        if drift {
            self.last_signal = Some(signal);
        }
        Ok(signal)
    }
}

/// Adds one value, compresses the histogram and drops old buckets while
/// some split's mean gap exceeds the range-scaled Hoeffding bound.
fn adwin_update(buckets: &mut VecDeque<Bucket>, value: f64, delta: f64) -> (bool, f64) {
    buckets.push_back(Bucket {
        count: 1,
        sum: value,
        min: value,
        max: value,
    });
    compress(buckets);
    let mut drift = false;
    let mut confidence = 0.0;
    loop {
        let (n, total, lo, hi) = buckets.iter().fold(
            (0u64, 0.0, f64::INFINITY, f64::NEG_INFINITY),
            |(n, s, lo, hi), b| (n + b.count, s + b.sum, lo.min(b.min), hi.max(b.max)),
        );
        let range = hi - lo;
        if n < 2 * ADWIN_MIN_SIDE || !(range > 0.0) {
            break;
        }
        let log_term = (4.0 * n as f64 / delta).ln();
        let (mut n0, mut s0) = (0u64, 0.0);
        let mut cut_at = None;
        let mut best_ratio: f64 = 0.0;
        for (i, b) in buckets.iter().enumerate().take(buckets.len() - 1) {
            n0 += b.count;
            s0 += b.sum;
            let n1 = n - n0;
            if n0 < ADWIN_MIN_SIDE || n1 < ADWIN_MIN_SIDE {
                continue;
            }
            let gap = (s0 / n0 as f64 - (total - s0) / n1 as f64).abs();
            let m = 1.0 / (1.0 / n0 as f64 + 1.0 / n1 as f64);
            let eps = range * (log_term / (2.0 * m)).sqrt();
            best_ratio = best_ratio.max(gap / eps);
            if gap > eps {
                cut_at = Some(i);
                break;
            }
        }
        confidence = f64::max(confidence, best_ratio.min(1.0));
        match cut_at {
            Some(i) => {
                drift = true;
                buckets.drain(..=i);
            }
            None => break,
        }
    }
    (drift, confidence)
}

fn compress(buckets: &mut VecDeque<Bucket>) {
    let mut size = 1u64;
    loop {
        let same: Vec<usize> = buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count == size)
            .map(|(i, _)| i)
            .collect();
        if same.len() <= ADWIN_MAX_BUCKETS {
            break;
        }
        let (a, b) = (same[0], same[1]);
        let merged = Bucket {
            count: size * 2,
            sum: buckets[a].sum + buckets[b].sum,
            min: buckets[a].min.min(buckets[b].min),
            max: buckets[a].max.max(buckets[b].max),
        };
        buckets[a] = merged;
        buckets.remove(b);
        size *= 2;
    }
}
