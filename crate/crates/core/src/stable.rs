//! Error-driven head calibration for the no-drift state.
//!
//! The branch smooths the window-level MAE of released labels with an EMA and
//! fires after the smoothed error has exceeded a threshold for `K_e`
//! consecutive evaluated steps while no drift is present.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{fine_tune_iterations, FineTuneOptions, FineTuneReport};
use crate::error::{Error, Result};
use crate::predictor::{Example, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableConfig {
    /// EMA smoothing coefficient.
    pub lambda: f64,
    /// Error threshold on the normalized scale.
    pub tau: f64,
    /// Consecutive exceedances needed to fire.
    pub consecutive: usize,
    /// Learning-rate scale applied to the base learning rate.
    pub lr_scale: f64,
    /// Optimizer steps per calibration.
    pub iterations: usize,
}

impl Default for StableConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            tau: 0.10,
            consecutive: 2,
            lr_scale: 0.1,
            iterations: 25,
        }
    }
}

impl StableConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("stable lambda must be in (0, 1], got {}", self.lambda)));
        }
        if self.consecutive == 0 || !(self.tau >= 0.0) || !(self.lr_scale > 0.0) {
            return Err(Error::Config(format!("invalid stable settings {self:?}")));
        }
        Ok(())
    }
}

/// Mean absolute error over a window of `L_w x K` predictions and labels.
pub fn window_error(preds: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, y) in preds.iter().zip(labels) {
        for (a, b) in p.iter().zip(y) {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn ema_update(prev: f64, e: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * prev + lambda * e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableState {
    pub config: StableConfig,
    /// Smoothed window error.
    pub ema: f64,
    pub consecutive_exceed: usize,
    /// Predictions waiting for their labels, by time index.
    predictions: BTreeMap<usize, Vec<f64>>,
}

impl StableState {
    pub fn new(config: StableConfig) -> Self {
        Self {
            config,
            ema: 0.0,
            consecutive_exceed: 0,
            predictions: BTreeMap::new(),
        }
    }

    pub fn cache_prediction(&mut self, t: usize, yhat: Vec<f64>) {
        self.predictions.insert(t, yhat);
    }

    pub fn cached(&self, t: usize) -> Option<&[f64]> {
        self.predictions.get(&t).map(Vec::as_slice)
    }

    /// Drops cached predictions older than `t`.
    pub fn release_before(&mut self, t: usize) {
        self.predictions = self.predictions.split_off(&t);
    }

    pub fn cache_len(&self) -> usize {
        self.predictions.len()
    }

    /// Folds a fresh window error into the EMA.
    pub fn observe(&mut self, e: f64) -> f64 {
        self.ema = ema_update(self.ema, e, self.config.lambda);
        self.ema
    }

    /// Consecutive-exceedance logic for a step whose EMA was just updated.
    pub fn trigger(&mut self, drift_level: u8) -> bool {
        if drift_level == 0 && self.ema > self.config.tau {
            self.consecutive_exceed += 1;
        } else {
            self.consecutive_exceed = 0;
        }
        if self.consecutive_exceed >= self.config.consecutive {
            self.consecutive_exceed = 0;
            true
        } else {
            false
        }
    }

    /// Called when a drift event fires.
    pub fn reset_count(&mut self) {
        self.consecutive_exceed = 0;
    }
}

/// Free-function form of [`StableState::trigger`].
pub fn stable_trigger(drift_level: u8, ema: f64, state: &mut StableState) -> bool {
    state.ema = ema;
    state.trigger(drift_level)
}

/// Head-only calibration for exactly `config.iterations` optimizer steps.
/// `opts` must train the head only. `head_inputs` optionally carries the
/// frozen head features of each example.
pub fn stable_finetune<R: Rng + ?Sized>(
    pred: &mut Predictor,
    examples: &[Example],
    head_inputs: Option<Vec<Vec<f64>>>,
    opts: &FineTuneOptions,
    config: &StableConfig,
    rng: &mut R,
) -> Result<FineTuneReport> {
    if examples.is_empty() {
        return Err(Error::NoLabels { t: 0 });
    }
    debug_assert!(opts.mask.head_only());
    Ok(fine_tune_iterations(pred, examples, head_inputs, opts, config.iterations, rng))
}
