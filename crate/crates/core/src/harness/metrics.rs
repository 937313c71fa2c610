//! Accuracy metrics, drift summaries and recovery times.

use serde::{Deserialize, Serialize};

use super::online::{Event, StepRecord, Trigger};
use crate::ingest::NormStats;
use crate::linalg::{mean, population_variance};

/// Guard added to variances and deviations in the normalized errors.
pub const EPS_REG: f64 = 1e-8;
/// MAPE denominators are at least this fraction of the target's max |y|.
pub const MAPE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub mse: f64,
    pub mae: f64,
    pub mape: f64,
    pub r2: f64,
}

/// Accuracy over a set of (prediction, truth) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub n: usize,
    pub targets: Vec<TargetMetrics>,
    pub nmse: Option<f64>,
    pub nmae: Option<f64>,
    pub mean_mape: Option<f64>,
    pub mean_r2: Option<f64>,
}

pub fn error_metrics(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> ErrorMetrics {
    assert_eq!(yhat.len(), y.len());
    let n = y.len();
    if n == 0 {
        return ErrorMetrics {
            n,
            targets: Vec::new(),
            nmse: None,
            nmae: None,
            mean_mape: None,
            mean_r2: None,
        };
    }
    let k_count = y[0].len();
    let mut targets = Vec::with_capacity(k_count);
    let (mut nmse, mut nmae) = (0.0, 0.0);
    for k in 0..k_count {
        let yk: Vec<f64> = y.iter().map(|r| r[k]).collect();
        let err: Vec<f64> = yhat.iter().zip(&yk).map(|(p, t)| p[k] - t).collect();
        let mse = err.iter().map(|e| e * e).sum::<f64>() / n as f64;
        let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
        let guard = (MAPE_GUARD * yk.iter().fold(0.0_f64, |m, v| m.max(v.abs()))).max(f64::MIN_POSITIVE);
        let mape = err.iter().zip(&yk).map(|(e, t)| e.abs() / t.abs().max(guard)).sum::<f64>() / n as f64 * 100.0;
        let var = population_variance(&yk);
        if var == 0.0 {
            log::warn!("target {k} has zero variance on the evaluation set");
        }
        let sse = mse * n as f64;
        let sst = var * n as f64;
        let r2 = 1.0 - sse / sst;
        nmse += mse / (var + EPS_REG);
        nmae += mae / (var.sqrt() + EPS_REG);
        targets.push(TargetMetrics { mse, mae, mape, r2 });
    }
    let kf = k_count as f64;
    ErrorMetrics {
        n,
        nmse: Some(nmse / kf),
        nmae: Some(nmae / kf),
        mean_mape: Some(targets.iter().map(|t| t.mape).sum::<f64>() / kf),
        mean_r2: Some(targets.iter().map(|t| t.r2).sum::<f64>() / kf),
        targets,
    }
}

/// Per-step absolute error averaged over targets on the offline min-max
/// scale; `None` where the step has no ground truth.
pub fn normalized_abs_error(records: &[StepRecord], stats: &NormStats) -> Vec<Option<f64>> {
    records
        .iter()
        .map(|r| {
            let y = r.y.as_ref()?;
            let errs: Vec<f64> = r
                .yhat
                .iter()
                .zip(y)
                .enumerate()
                .map(|(k, (p, t))| (p - t).abs() / stats.target_range(k))
                .collect();
            Some(mean(&errs))
        })
        .collect()
}

/// Mean of [`normalized_abs_error`] over the trailing `window` records;
/// `None` until `window` consecutive records have ground truth.
pub fn windowed_normalized_mae(records: &[StepRecord], stats: &NormStats, window: usize) -> Vec<Option<f64>> {
    let errs = normalized_abs_error(records, stats);
    (0..errs.len())
        .map(|i| {
            let start = (i + 1).checked_sub(window)?;
            let w: Option<Vec<f64>> = errs[start..=i].iter().copied().collect();
            w.map(|v| mean(&v))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub t: usize,
    pub level: u8,
    /// Steps from the drift event until the windowed error fell below the
    /// level's threshold; `None` if it never did.
    pub steps: Option<usize>,
}

/// Recovery time of every drift event that triggered adaptation.
pub fn recovery_times(
    records: &[StepRecord],
    events: &[Event],
    stats: &NormStats,
    window: usize,
    thresholds: &[f64; 3],
) -> Vec<Recovery> {
    let wmae = windowed_normalized_mae(records, stats, window);
    events
        .iter()
        .filter_map(|e| match e {
            Event::Drift {
                t,
                effective_level,
                adapted: true,
                ..
            } => Some((*t, *effective_level)),
            _ => None,
        })
        .map(|(t, level)| {
            let th = thresholds[usize::from(level.clamp(1, 3)) - 1];
            let steps = records
                .iter()
                .zip(&wmae)
                .find(|(r, w)| r.t >= t && w.is_some_and(|v| v < th))
                .map(|(r, _)| r.t - t);
            Recovery { t, level, steps }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    /// Drift events (adapted or not).
    pub detections: usize,
    pub adaptations: usize,
    /// Detections per effective level 1..=3.
    pub by_level: [usize; 3],
    pub stable_triggers: usize,
    pub finetunes_drift: usize,
    pub finetunes_stable: usize,
}

pub fn drift_summary(events: &[Event]) -> DriftSummary {
    let mut s = DriftSummary::default();
    for e in events {
        match e {
            Event::Drift {
                effective_level,
                adapted,
                ..
            } => {
                s.detections += 1;
                s.adaptations += usize::from(*adapted);
                if (1..=3).contains(effective_level) {
                    s.by_level[usize::from(*effective_level) - 1] += 1;
                }
            }
            Event::Stable { .. } => s.stable_triggers += 1,
            Event::Finetune { trigger, .. } => match trigger {
                Trigger::Drift => s.finetunes_drift += 1,
                Trigger::Stable => s.finetunes_stable += 1,
            },
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecovery {
    pub level: u8,
    pub events: usize,
    pub recovered: usize,
    pub mean_steps: Option<f64>,
    /// Recovery time per event, `None` for events that never recovered.
    pub steps: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub accuracy: ErrorMetrics,
    pub drift: DriftSummary,
    pub recovery: Vec<LevelRecovery>,
}

/// Accuracy over the steps whose labels were released during the run,
/// plus event summaries. Recovery times use all ground truth.
pub fn compute_metrics(
    records: &[StepRecord],
    events: &[Event],
    stats: &NormStats,
    window: usize,
    recovery_thresholds: &[f64; 3],
) -> MetricsReport {
    let (yhat, y): (Vec<Vec<f64>>, Vec<Vec<f64>>) = records
        .iter()
        .filter(|r| r.released)
        .filter_map(|r| r.y.as_ref().map(|y| (r.yhat.clone(), y.clone())))
        .unzip();
    let recoveries = recovery_times(records, events, stats, window, recovery_thresholds);
    let recovery = (1..=3u8)
        .map(|level| {
            let steps: Vec<Option<usize>> = recoveries.iter().filter(|r| r.level == level).map(|r| r.steps).collect();
            let done: Vec<f64> = steps.iter().flatten().map(|&s| s as f64).collect();
            LevelRecovery {
                level,
                events: steps.len(),
                recovered: done.len(),
                mean_steps: (!done.is_empty()).then(|| mean(&done)),
                steps,
            }
        })
        .collect();
    MetricsReport {
        accuracy: error_metrics(&yhat, &y),
        drift: drift_summary(events),
        recovery,
    }
}
