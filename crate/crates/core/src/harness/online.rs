//! The online detect / adapt / predict loop.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::offline::{FeatureCache, OfflineModel};
use crate::adapt::{
    build_adaptation_set, fine_tune, AdaptationSet, Composition, FineTuneOptions, FineTuneReport, LossWeights,
    ReplayBuffer, ReplayRecord, SetInputs, SetParams, Source,
};
use crate::drift::{CompletedAdaptation, DetectionWindow, DriftState};
use crate::error::{Error, Result};
use crate::ingest::{make_window, NormStats, Stream};
use crate::memory::MemoryQueue;
use crate::predictor::{set_trainable, GroupRates, Level, Predictor};
use crate::stable::{stable_finetune, window_error, StableState};

/// What happened at one online step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub yhat: Vec<f64>,
    /// Ground truth for evaluation, when the stream has a label at `t`.
    pub y: Option<Vec<f64>>,
    /// Whether the label was released to the learner before the run ended.
    pub released: bool,
    /// Drift score, when detection ran at this step.
    pub score: Option<f64>,
    /// Effective drift level, when detection ran at this step.
    pub level: Option<u8>,
    pub adapted: bool,
    pub stable_fired: bool,
    /// Smoothed window error after this step.
    pub ema: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Drift,
    Stable,
}

/// Entries of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Drift {
        t: usize,
        score: f64,
        raw_level: u8,
        effective_level: u8,
        /// Adaptations completed so far, this one included.
        c_t: usize,
        /// False when no labeled data was available.
        adapted: bool,
    },
    Stable {
        t: usize,
        ema: f64,
    },
    Finetune {
        t: usize,
        level: Level,
        trigger: Trigger,
        composition: Composition,
        epochs_run: usize,
        final_train_loss: f64,
        final_val_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_time_ms: Option<f64>,
    },
}

impl Event {
    pub fn t(&self) -> usize {
        match self {
            Event::Drift { t, .. } | Event::Stable { t, .. } | Event::Finetune { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub predictor: Predictor,
    pub drift: DriftState,
    pub queue: MemoryQueue,
    pub stats: NormStats,
}

/// Online state between steps.
pub struct Engine {
    cfg: RunConfig,
    predictor: Predictor,
    stats: NormStats,
    stream: Stream,
    drift: DriftState,
    queue: MemoryQueue,
    cache: FeatureCache,
    replay: ReplayBuffer,
    stable: StableState,
    rng: ChaCha8Rng,
    events: Vec<Event>,
    records: Vec<StepRecord>,
    /// Head features by time step, valid until the frozen groups change.
    head_memo: HashMap<usize, Vec<f64>>,
}

fn detection_window(pred: &Predictor, stream: &Stream, now: usize, len: usize) -> Result<DetectionWindow> {
    let vectors = (now + 1 - len..=now)
        .map(|t| pred.project(stream.features(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionWindow::new(vectors, now))
}

impl Engine {
    pub fn new(cfg: &RunConfig, model: OfflineModel) -> Self {
        Self {
            cfg: cfg.clone(),
            predictor: model.predictor,
            stats: model.stats,
            stream: model.stream,
            drift: model.drift,
            queue: model.queue,
            cache: model.cache,
            replay: model.replay,
            stable: StableState::new(cfg.stable),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            events: Vec::new(),
            records: Vec::new(),
            head_memo: HashMap::new(),
        }
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    /// Mutable model access, e.g. to inject faults in experiments.
    pub fn predictor_mut(&mut self) -> &mut Predictor {
        self.head_memo.clear();
        &mut self.predictor
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn build_set(&mut self, now: usize, current: &DetectionWindow, epsilon: f64) -> Result<AdaptationSet> {
        let pred = &self.predictor;
        let cache = &self.cache;
        let project = |x: &[f64]| pred.project(x).expect("feature width checked at load");
        let context = |t: usize| cache.context(pred, t);
        let inputs = SetInputs {
            now,
            stream: &self.stream,
            buffer: &self.replay,
            current,
            kernel: &self.drift.kernel,
            project: &project,
            context: &context,
        };
        let params = SetParams {
            n_ft: self.cfg.n_ft,
            tau_h: self.cfg.tau_h,
            epsilon,
            window: self.cfg.window,
        };
        build_adaptation_set(&inputs, &params, &mut self.rng)
    }

    fn weights(&self, w: LossWeights) -> LossWeights {
        if self.cfg.joint_loss {
            w
        } else {
            LossWeights::MSE_ONLY
        }
    }

    fn finetune_event(&self, t: usize, level: Level, trigger: Trigger, set: &AdaptationSet, r: &FineTuneReport, started: Option<Instant>) -> Event {
        Event::Finetune {
            t,
            level,
            trigger,
            composition: set.composition(),
            epochs_run: r.epochs_run,
            final_train_loss: r.final_train_loss,
            final_val_loss: r.final_val_loss,
            wall_time_ms: started.map(|s| s.elapsed().as_secs_f64() * 1e3),
        }
    }

    /// Drift-triggered adaptation at level `d`. Returns the fine-tune event,
    /// or `None` when there was nothing labeled to adapt on.
    fn adapt(&mut self, now: usize, d: u8, current: &DetectionWindow) -> Result<Option<Event>> {
        let started = self.cfg.record_wall_time.then(Instant::now);
        let level = Level::from_drift(d).ok_or_else(|| Error::UnknownLevel(d.to_string()))?;
        let recipe = self.cfg.levels[level.recipe_index() - 1];
        let set = match self.build_set(now, current, recipe.epsilon) {
            Ok(set) => set,
            Err(Error::NoLabels { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut opts = FineTuneOptions::for_level(
            level,
            &recipe,
            self.cfg.base_lr,
            self.cfg.adam,
            self.cfg.batch_size,
            self.cfg.horizon,
        );
        opts.weights = self.weights(recipe.weights);
        let report = fine_tune(&mut self.predictor, &set.examples(), &opts, &mut self.rng);
        self.head_memo.clear();
        let promoted = detection_window(&self.predictor, &self.stream, now, self.cfg.detection_window)?;
        self.drift.promote_reference(promoted, CompletedAdaptation::at(now));
        Ok(Some(self.finetune_event(now, level, Trigger::Drift, &set, &report, started)))
    }

    /// Head-only calibration of the stable branch.
    fn calibrate(&mut self, now: usize) -> Result<Option<Event>> {
        let started = self.cfg.record_wall_time.then(Instant::now);
        let recipe = self.cfg.levels[0];
        let current = detection_window(&self.predictor, &self.stream, now, self.cfg.detection_window)?;
        let set = match self.build_set(now, &current, recipe.epsilon) {
            Ok(set) => set,
            Err(Error::NoLabels { .. }) => {
                log::info!("t={now}: stable calibration skipped, no labeled data");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let stable = self.cfg.stable;
        let opts = FineTuneOptions {
            mask: set_trainable(Level::Stable),
            rates: GroupRates::uniform(stable.lr_scale * self.cfg.base_lr),
            adam: self.cfg.adam,
            max_epochs: 0,
            patience: 0,
            val_split: 0.0,
            l2sp_coeff: recipe.l2sp_coeff,
            weights: self.weights(recipe.weights),
            batch_size: self.cfg.batch_size,
            horizon: self.cfg.horizon,
        };
        let features = self.head_features(&set);
        let report = stable_finetune(&mut self.predictor, &set.examples(), Some(features), &opts, &stable, &mut self.rng)?;
        Ok(Some(self.finetune_event(now, Level::Stable, Trigger::Stable, &set, &report, started)))
    }

    /// Frozen head features of every set entry. Only entries that use the
    /// stream window at their time step are memoized.
    fn head_features(&mut self, set: &AdaptationSet) -> Vec<Vec<f64>> {
        let pred = &self.predictor;
        set.entries
            .iter()
            .map(|e| match e.source {
                Source::Resampled | Source::Perturbed => pred.head_features(&e.example),
                Source::CurrentLabeled | Source::SimilarHistory => self
                    .head_memo
                    .entry(e.example.t)
                    .or_insert_with(|| pred.head_features(&e.example))
                    .clone(),
            })
            .collect()
    }

    /// Window error over the `L_w` most recent steps whose labels are released,
    /// on the offline min-max target scale. `None` while any of them is missing.
    fn released_window_error(&self, now: usize) -> Option<f64> {
        let tau = match self.cfg.latency {
            crate::ingest::Latency::Steps(tau) => tau,
            crate::ingest::Latency::Never => return None,
        };
        let end = now.checked_sub(tau)?;
        let start = (end + 1).checked_sub(self.cfg.detection_window)?;
        let mut preds = Vec::with_capacity(self.cfg.detection_window);
        let mut labels = Vec::with_capacity(self.cfg.detection_window);
        for t in start..=end {
            let yhat = self.stable.cached(t)?;
            let y = self.stream.label_at(t, now)?;
            preds.push(yhat.iter().enumerate().map(|(k, &v)| self.stats.scale_target(k, v)).collect());
            labels.push(y.iter().enumerate().map(|(k, &v)| self.stats.scale_target(k, v)).collect());
        }
        Some(window_error(&preds, &labels))
    }

    /// Processes time index `now`: detect, adapt, predict, ingest labels,
    /// stable branch.
    pub fn step(&mut self, now: usize) -> Result<()> {
        let started = self.cfg.record_wall_time.then(Instant::now);
        let cfg = &self.cfg;
        let (lw, l, r) = (cfg.detection_window, cfg.window, cfg.memory_agg);
        if now >= self.stream.len() || now + 1 < l.max(lw) {
            return Err(Error::WindowUnavailable { t: now, len: l.max(lw) });
        }

        // Detection and drift-triggered adaptation.
        let mut record = StepRecord {
            t: now,
            yhat: Vec::new(),
            y: None,
            released: false,
            score: None,
            level: None,
            adapted: false,
            stable_fired: false,
            ema: self.stable.ema,
            wall_time_us: None,
        };
        let mut d = 0;
        if self.cfg.drift_enabled && self.drift.should_detect(now, lw) {
            let current = detection_window(&self.predictor, &self.stream, now, lw)?;
            let a = self.drift.assess(&current)?;
            record.score = Some(a.score);
            record.level = Some(a.effective_level);
            d = a.effective_level;
            if d >= 1 {
                self.stable.reset_count();
                let finetune = self.adapt(now, d, &current)?;
                if finetune.is_none() {
                    log::info!("t={now}: drift level {d} but no labeled data, adaptation skipped");
                    self.drift.note_attempt(now);
                }
                record.adapted = finetune.is_some();
                self.events.push(Event::Drift {
                    t: now,
                    score: a.score,
                    raw_level: a.raw_level,
                    effective_level: d,
                    c_t: self.drift.events,
                    adapted: record.adapted,
                });
                self.events.extend(finetune);
            }
        }

        // Prediction on the memory-enhanced window.
        let window = make_window(&self.stream, now, l)?.data;
        let ctx = self.cache.context(&self.predictor, now);
        let front = self.predictor.front_forward(&window, &ctx);
        let back = self.predictor.backbone_forward(&front.zt);
        if self.predictor.arch.memory_fusion {
            debug_assert!(r <= self.queue.capacity());
            self.queue.push(self.predictor.memory_item(&back.pooled))?;
        }
        self.cache.pooled[now] = Some(back.pooled);
        record.yhat = back.yhat.clone();
        self.stable.cache_prediction(now, back.yhat);

        // Labels released at this step join the replay buffer.
        if let crate::ingest::Latency::Steps(tau) = self.cfg.latency {
            if let Some(t) = now.checked_sub(tau) {
                if let Some(y) = self.stream.label_at(t, now) {
                    if self.stream.sample(t).label_release_t == Some(now) {
                        self.replay.push(ReplayRecord {
                            t,
                            x: self.stream.features(t).to_vec(),
                            y: y.to_vec(),
                        });
                    }
                }
            }
        }

        // Stable branch: only steps with a complete labeled window count.
        if self.cfg.stable_enabled {
            if let Some(e) = self.released_window_error(now) {
                let ema = self.stable.observe(e);
                if self.stable.trigger(d) {
                    self.events.push(Event::Stable { t: now, ema });
                    if let Some(ev) = self.calibrate(now)? {
                        self.events.push(ev);
                        record.stable_fired = true;
                    }
                }
            }
            if let crate::ingest::Latency::Steps(tau) = self.cfg.latency {
                // The next window starts one step later.
                self.stable.release_before((now + 2).saturating_sub(tau + lw));
            }
        }
        record.ema = self.stable.ema;
        record.wall_time_us = started.map(|s| s.elapsed().as_micros() as u64);
        self.records.push(record);
        Ok(())
    }

    /// Runs every remaining step, then attaches ground truth and notes which
    /// labels were released by the end of the stream.
    pub fn finish(mut self) -> Result<RunOutput> {
        let start = self.records.last().map_or(self.cfg.offline_size, |r| r.t + 1);
        for now in start..self.stream.len() {
            self.step(now)?;
        }
        let last = self.stream.len().saturating_sub(1);
        for rec in &mut self.records {
            rec.y = self.stream.sample(rec.t).ground_truth().map(<[f64]>::to_vec);
            rec.released = self.stream.label_at(rec.t, last).is_some();
        }
        Ok(RunOutput {
            records: self.records,
            events: self.events,
            predictor: self.predictor,
            drift: self.drift,
            queue: self.queue,
            stats: self.stats,
        })
    }
}

/// Runs the online phase over every step after the offline split.
pub fn run_online(cfg: &RunConfig, model: OfflineModel) -> Result<RunOutput> {
    Engine::new(cfg, model).finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::offline::offline_train;
    use crate::harness::synth::{synth_stream, SynthSpec};
    use crate::ingest::Latency;
    use crate::predictor::idx;

    fn engine() -> Engine {
        let spec = SynthSpec::two_segment(300, 60, 3.0, 0.1, 7);
        let stream = synth_stream(&spec, 7, Latency::Steps(12)).unwrap().stream;
        let cfg = RunConfig {
            offline_size: 200,
            offline_epochs: 3,
            seed: 7,
            ..RunConfig::default()
        };
        Engine::new(&cfg, offline_train(&cfg, &stream).unwrap())
    }

    #[test]
    fn memoized_head_features_match_recomputation() {
        let mut e = engine();
        for t in 200..290 {
            e.step(t).unwrap();
        }
        let current = detection_window(&e.predictor, &e.stream, 289, e.cfg.detection_window).unwrap();
        let set = e.build_set(289, &current, 0.01).unwrap();
        let fresh: Vec<Vec<f64>> = set.entries.iter().map(|x| e.predictor.head_features(&x.example)).collect();
        assert_eq!(e.head_features(&set), fresh);
        assert_eq!(e.head_features(&set), fresh);

        e.predictor_mut().params.get_mut(idx::FUSION_B).iter_mut().for_each(|b| *b += 0.5);
        let moved: Vec<Vec<f64>> = set.entries.iter().map(|x| e.predictor.head_features(&x.example)).collect();
        assert_ne!(moved, fresh);
        assert_eq!(e.head_features(&set), moved);
    }

    #[test]
    fn records_follow_time() {
        let out = engine().finish().unwrap();
        assert_eq!(out.records.len(), 160);
        assert!(out.records.iter().enumerate().all(|(i, r)| r.t == 200 + i && r.y.is_some()));
        // The final latency span is evaluated but was never shown to the learner.
        assert_eq!(out.records.iter().filter(|r| !r.released).count(), 12);
    }
}
