//! Level-specific fine-tuning with chronological validation, early stopping
//! and an L2 pull towards the pre-event parameters.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{blocked_loss_and_grad, LossWeights};
use crate::error::{Error, Result};
use crate::predictor::{idx, set_trainable, AdamW, AdamWConfig, Example, FreezeMask, GroupRates, Level, Params, Predictor};

/// Fine-tuning recipe for one drift severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub lr_scale: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_split: f64,
    pub lower_lr_multiplier: f64,
    pub l2sp_coeff: f64,
    pub weights: LossWeights,
    pub epsilon: f64,
}

impl LevelConfig {
    /// Default recipe for drift level `1..=3`.
    pub fn defaults(level: u8) -> Result<Self> {
        let (lr_scale, max_epochs, patience, val_split, lower_lr_multiplier, l2sp_coeff, weights) = match level {
            1 => (0.10, 30, 5, 0.15, 0.5, 5e-5, (0.3, 0.2, 0.05)),
            2 => (0.15, 40, 8, 0.12, 0.5, 2e-6, (0.5, 0.3, 0.1)),
            3 => (0.25, 50, 10, 0.10, 0.7, 0.0, (0.7, 0.4, 0.2)),
            other => return Err(Error::UnknownLevel(other.to_string())),
        };
        Ok(Self {
            lr_scale,
            max_epochs,
            patience,
            val_split,
            lower_lr_multiplier,
            l2sp_coeff,
            weights: LossWeights {
                trend: weights.0,
                diff: weights.1,
                vol: weights.2,
            },
            epsilon: 0.01,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ok = self.lr_scale > 0.0
            && self.val_split > 0.0
            && self.val_split < 1.0
            && self.lower_lr_multiplier >= 0.0
            && self.l2sp_coeff >= 0.0
            && self.epsilon >= 0.0
            && w.trend >= 0.0
            && w.diff >= 0.0
            && w.vol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid level recipe {self:?}")))
        }
    }
}

/// Fully resolved optimization settings for one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOptions {
    pub mask: FreezeMask,
    pub rates: GroupRates,
    pub adam: AdamWConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_split: f64,
    pub l2sp_coeff: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub horizon: usize,
}

impl FineTuneOptions {
    pub fn for_level(
        level: Level,
        cfg: &LevelConfig,
        base_lr: f64,
        adam: AdamWConfig,
        batch_size: usize,
        horizon: usize,
    ) -> Self {
        Self {
            mask: set_trainable(level),
            rates: GroupRates::layered(base_lr, cfg.lr_scale, cfg.lower_lr_multiplier),
            adam,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            val_split: cfg.val_split,
            l2sp_coeff: cfg.l2sp_coeff,
            weights: cfg.weights,
            batch_size,
            horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (0 = the starting parameters).
    pub best_epoch: usize,
    /// Mean training objective of the last epoch run.
    pub final_train_loss: f64,
    /// Validation loss of the kept parameters, if a validation split existed.
    pub final_val_loss: Option<f64>,
    pub train_history: Vec<f64>,
    pub val_history: Vec<f64>,
}

/// Forward pass specialised on the trainable part of the network. When only
/// the head trains, the head inputs are computed once.
struct Runner<'a> {
    examples: Vec<&'a Example>,
    head_inputs: Option<Vec<Vec<f64>>>,
}

impl<'a> Runner<'a> {
    fn new(pred: &Predictor, examples: Vec<&'a Example>, head_only: bool) -> Self {
        let head_inputs = head_only.then(|| examples.iter().map(|e| pred.head_features(e)).collect());
        Self { examples, head_inputs }
    }

    fn head(pred: &Predictor, fused: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; pred.arch.targets];
        crate::linalg::affine(pred.params.get(idx::HEAD_W), pred.params.get(idx::HEAD_B), fused, &mut y);
        y
    }

    fn predict(&self, pred: &Predictor, i: usize) -> Vec<f64> {
        match &self.head_inputs {
            Some(h) => Self::head(pred, &h[i]),
            None => pred.forward_example(self.examples[i]).back.yhat,
        }
    }

    /// Joint loss over `range` in time order, without regularization.
    fn loss(&self, pred: &Predictor, range: std::ops::Range<usize>, opts: &FineTuneOptions) -> f64 {
        if range.is_empty() {
            return 0.0;
        }
        let yhat: Vec<Vec<f64>> = range.clone().map(|i| self.predict(pred, i)).collect();
        let y: Vec<Vec<f64>> = range.map(|i| self.examples[i].target.clone()).collect();
        blocked_loss_and_grad(&yhat, &y, &opts.weights, opts.horizon).0
    }

    /// Objective and gradient of one batch (a contiguous, time-ordered range).
    fn batch_grad(
        &self,
        pred: &Predictor,
        range: std::ops::Range<usize>,
        opts: &FineTuneOptions,
        anchor: &Params,
        grads: &mut Params,
    ) -> f64 {
        grads.fill_zero();
        let head_only = self.head_inputs.is_some();
        let mut yhat = Vec::with_capacity(range.len());
        let mut caches = Vec::new();
        for i in range.clone() {
            match &self.head_inputs {
                Some(h) => yhat.push(Self::head(pred, &h[i])),
                None => {
                    let c = pred.forward_example(self.examples[i]);
                    yhat.push(c.back.yhat.clone());
                    caches.push(c);
                }
            }
        }
        let y: Vec<Vec<f64>> = range.clone().map(|i| self.examples[i].target.clone()).collect();
        let (mut loss, dy) = blocked_loss_and_grad(&yhat, &y, &opts.weights, opts.horizon);
        for (j, i) in range.enumerate() {
            if head_only {
                pred.backward_head(&self.head_inputs.as_ref().unwrap()[i], &dy[j], grads);
            } else {
                pred.backward(&caches[j], &dy[j], None, grads, false);
            }
        }
        if opts.l2sp_coeff > 0.0 {
            loss += opts.l2sp_coeff * pred.params.masked_sq_distance(anchor, &opts.mask);
            for ((g, p), a) in grads.tensors.iter_mut().zip(&pred.params.tensors).zip(&anchor.tensors) {
                if opts.mask.is_trainable(p.group) {
                    for ((gv, pv), av) in g.data.iter_mut().zip(&p.data).zip(&a.data) {
                        *gv += 2.0 * opts.l2sp_coeff * (pv - av);
                    }
                }
            }
        }
        loss
    }
}

fn chronological(examples: &[Example]) -> Vec<&Example> {
    let mut order: Vec<&Example> = examples.iter().collect();
    // Stable sort keeps insertion order among equal timestamps.
    order.sort_by_key(|e| e.t);
    order
}

fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let batch = batch.max(1);
    (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect()
}

/// Number of held-out examples for `n` examples.
pub fn validation_size(n: usize, val_split: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * val_split).round() as usize).clamp(1, n - 1)
}

/// Mini-batch AdamW on the joint loss plus L2-SP, with the chronologically
/// last `val_split` fraction held out and early stopping on validation loss.
/// The parameters with the lowest validation loss (the starting parameters
/// included) are restored at the end.
pub fn fine_tune<R: Rng + ?Sized>(
    pred: &mut Predictor,
    examples: &[Example],
    opts: &FineTuneOptions,
    rng: &mut R,
) -> FineTuneReport {
    let ordered = chronological(examples);
    let n = ordered.len();
    let n_val = validation_size(n, opts.val_split);
    let n_train = n - n_val;
    let runner = Runner::new(pred, ordered, opts.mask.head_only());
    let anchor = pred.params.clone();
    let mut opt = AdamW::new(opts.adam, &pred.params);
    let mut grads = pred.params.zeros_like();
    let mut batches = batch_ranges(n_train, opts.batch_size);

    let val = |p: &Predictor| (n_val > 0).then(|| runner.loss(p, n_train..n, opts));
    let mut best_val = val(pred);
    let mut best_params = pred.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut report = FineTuneReport {
        epochs_run: 0,
        best_epoch: 0,
        final_train_loss: f64::NAN,
        final_val_loss: best_val,
        train_history: Vec::new(),
        val_history: Vec::new(),
    };

    for epoch in 1..=opts.max_epochs {
        batches.shuffle(rng);
        let mut total = 0.0;
        for r in &batches {
            total += runner.batch_grad(pred, r.clone(), opts, &anchor, &mut grads);
            opt.step(&mut pred.params, &grads, &opts.mask, &opts.rates);
        }
        let train = total / batches.len().max(1) as f64;
        report.train_history.push(train);
        report.epochs_run = epoch;
        match (val(pred), best_val) {
            (Some(v), Some(b)) => {
                report.val_history.push(v);
                if v < b {
                    best_val = Some(v);
                    best_params = pred.params.clone();
                    best_epoch = epoch;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= opts.patience {
                        break;
                    }
                }
            }
            _ => {
                best_params = pred.params.clone();
                best_epoch = epoch;
            }
        }
    }
    pred.params = best_params;
    report.best_epoch = best_epoch;
    report.final_val_loss = best_val;
    report.final_train_loss = report.train_history.last().copied().unwrap_or(f64::NAN);
    report
}

/// Exactly `iterations` optimizer steps cycling over shuffled contiguous
/// batches of all examples, without validation.
///
/// For head-only masks, `head_inputs` may supply the frozen head features of
/// each example (aligned with `examples`) instead of recomputing them.
pub fn fine_tune_iterations<R: Rng + ?Sized>(
    pred: &mut Predictor,
    examples: &[Example],
    head_inputs: Option<Vec<Vec<f64>>>,
    opts: &FineTuneOptions,
    iterations: usize,
    rng: &mut R,
) -> FineTuneReport {
    let runner = match head_inputs.filter(|h| opts.mask.head_only() && h.len() == examples.len()) {
        Some(mut h) => {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.sort_by_key(|&i| examples[i].t);
            Runner {
                examples: order.iter().map(|&i| &examples[i]).collect(),
                head_inputs: Some(order.iter().map(|&i| std::mem::take(&mut h[i])).collect()),
            }
        }
        None => Runner::new(pred, chronological(examples), opts.mask.head_only()),
    };
    let n = runner.examples.len();
    let anchor = pred.params.clone();
    let mut opt = AdamW::new(opts.adam, &pred.params);
    let mut grads = pred.params.zeros_like();
    let mut batches = batch_ranges(n, opts.batch_size);
    let mut history = Vec::new();
    let mut done = 0;
    while done < iterations && !batches.is_empty() {
        batches.shuffle(rng);
        for r in &batches {
            if done == iterations {
                break;
            }
            history.push(runner.batch_grad(pred, r.clone(), opts, &anchor, &mut grads));
            opt.step(&mut pred.params, &grads, &opts.mask, &opts.rates);
            done += 1;
        }
    }
    FineTuneReport {
        epochs_run: done.div_ceil(batches.len().max(1)),
        best_epoch: 0,
        final_train_loss: history.last().copied().unwrap_or(f64::NAN),
        final_val_loss: None,
        train_history: history,
        val_history: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::predictor::{Architecture, Group, MemoryContext};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn examples(arch: &Architecture, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|t| {
                let data: Vec<f64> = (0..arch.features * arch.window).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = data.iter().sum::<f64>() / data.len() as f64;
                let mut context = MemoryContext::empty(arch);
                context.present.iter_mut().for_each(|p| *p = true);
                context.pooled.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
                Example {
                    t,
                    window: Matrix::from_vec(arch.features, arch.window, data),
                    context,
                    target: vec![2.0 * s - 1.0, 0.5 - s],
                }
            })
            .collect()
    }

    fn opts(level: u8) -> FineTuneOptions {
        let lv = Level::from_drift(level).unwrap();
        FineTuneOptions::for_level(lv, &LevelConfig::defaults(level).unwrap(), 1e-3, AdamWConfig::default(), 32, 8)
    }

    #[test]
    fn recipes() {
        let l1 = LevelConfig::defaults(1).unwrap();
        assert_eq!((l1.max_epochs, l1.patience, l1.val_split, l1.l2sp_coeff), (30, 5, 0.15, 5e-5));
        assert_eq!((l1.weights.trend, l1.weights.diff, l1.weights.vol), (0.3, 0.2, 0.05));
        let l2 = LevelConfig::defaults(2).unwrap();
        assert_eq!((l2.max_epochs, l2.patience, l2.val_split, l2.l2sp_coeff), (40, 8, 0.12, 2e-6));
        let l3 = LevelConfig::defaults(3).unwrap();
        assert_eq!((l3.weights.trend, l3.weights.diff, l3.weights.vol), (0.7, 0.4, 0.2));
        assert_eq!(l3.l2sp_coeff, 0.0);
        assert!(LevelConfig::defaults(0).is_err());
        for l in 1..=3 {
            LevelConfig::defaults(l).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn masked_groups_are_untouched_and_validation_never_worsens() {
        let arch = Architecture::new(3, 4, 2, 6, 2);
        let data = examples(&arch, 90, 1);
        for level in 1..=3u8 {
            let mut pred = Predictor::new(arch, 4).unwrap();
            let before = pred.params.clone();
            let o = opts(level);
            let n_val = validation_size(data.len(), o.val_split);
            let runner_before = {
                let ordered = chronological(&data);
                Runner::new(&pred, ordered, false).loss(&pred, data.len() - n_val..data.len(), &o)
            };
            let report = fine_tune(&mut pred, &data, &o, &mut ChaCha8Rng::seed_from_u64(2));
            for g in Group::ALL {
                if !o.mask.is_trainable(g) {
                    assert_eq!(pred.params.group_hash(g), before.group_hash(g), "level {level} {g:?}");
                }
            }
            let kept = report.final_val_loss.unwrap();
            assert!(kept <= runner_before);
            let min_seen = report.val_history.iter().copied().fold(runner_before, f64::min);
            assert_eq!(kept, min_seen);
            assert!(report.epochs_run >= 1);
        }
    }

    #[test]
    fn restored_parameters_reproduce_best_validation() {
        let arch = Architecture::new(3, 4, 2, 6, 2);
        let data = examples(&arch, 60, 3);
        let mut pred = Predictor::new(arch, 5).unwrap();
        let o = opts(3);
        let report = fine_tune(&mut pred, &data, &o, &mut ChaCha8Rng::seed_from_u64(7));
        let n_val = validation_size(data.len(), o.val_split);
        let ordered = chronological(&data);
        let again = Runner::new(&pred, ordered, false).loss(&pred, data.len() - n_val..data.len(), &o);
        assert_eq!(again, report.final_val_loss.unwrap());
    }

    #[test]
    fn perfectly_fit_set_keeps_parameters() {
        let arch = Architecture::new(3, 4, 2, 6, 2);
        let mut data = examples(&arch, 40, 9);
        let mut pred = Predictor::new(arch, 6).unwrap();
        for e in data.iter_mut() {
            e.target = pred.forward_example(e).back.yhat;
        }
        let before = pred.params.clone();
        let report = fine_tune(&mut pred, &data, &opts(1), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(report.best_epoch, 0);
        assert_eq!(pred.params, before);
        assert_eq!(report.final_val_loss, Some(0.0));
    }

    #[test]
    fn l2sp_pulls_towards_anchor() {
        // With a perfect fit the data gradient vanishes, so one step is pure
        // regularization: every moved coordinate must approach the anchor.
        let arch = Architecture::new(3, 4, 2, 6, 2);
        let mut data = examples(&arch, 32, 11);
        let pred = Predictor::new(arch, 8).unwrap();
        let anchor = pred.params.clone();
        let mut shifted = pred.clone();
        shifted.params.get_mut(idx::HEAD_B)[0] += 0.3;
        shifted.params.get_mut(idx::HEAD_W)[1] -= 0.2;
        for e in data.iter_mut() {
            e.target = shifted.forward_example(e).back.yhat;
        }
        let mut o = opts(1);
        o.l2sp_coeff = 0.5;
        o.adam.weight_decay = 0.0;
        let ordered = chronological(&data);
        let runner = Runner::new(&shifted, ordered, true);
        let mut grads = shifted.params.zeros_like();
        runner.batch_grad(&shifted, 0..32, &o, &anchor, &mut grads);
        let before = shifted.params.clone();
        let mut opt = AdamW::new(o.adam, &shifted.params);
        opt.step(&mut shifted.params, &grads, &o.mask, &o.rates);
        let d_before = before.masked_sq_distance(&anchor, &o.mask);
        let d_after = shifted.params.masked_sq_distance(&anchor, &o.mask);
        assert!(d_after < d_before);
        for (i, (a, b)) in shifted.params.get(idx::HEAD_B).iter().zip(before.get(idx::HEAD_B)).enumerate() {
            let target = anchor.get(idx::HEAD_B)[i];
            assert!((a - target).abs() <= (b - target).abs());
        }
    }

    #[test]
    fn iteration_budget_is_exact() {
        let arch = Architecture::new(3, 4, 2, 6, 2);
        let data = examples(&arch, 70, 12);
        let mut pred = Predictor::new(arch, 9).unwrap();
        let before = pred.params.clone();
        let mut o = opts(1);
        o.rates = GroupRates::uniform(1e-4);
        let r = fine_tune_iterations(&mut pred, &data, None, &o, 25, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(r.train_history.len(), 25);
        for g in [Group::Projection, Group::Lower, Group::Upper, Group::Memory, Group::Gate] {
            assert_eq!(pred.params.group_hash(g), before.group_hash(g));
        }
        assert_ne!(pred.params.group_hash(Group::Head), before.group_hash(Group::Head));
    }

    #[test]
    fn tiny_sets_use_one_batch() {
        assert_eq!(batch_ranges(5, 32), vec![0..5]);
        assert_eq!(batch_ranges(65, 32), vec![0..32, 32..64, 64..65]);
        assert_eq!(validation_size(1, 0.15), 0);
        assert_eq!(validation_size(300, 0.15), 45);
        assert_eq!(validation_size(3, 0.1), 1);
    }
}
