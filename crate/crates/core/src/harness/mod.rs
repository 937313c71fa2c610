//! Experiment driver: offline pre-training, the online
//! detect / adapt / predict loop, metrics and report files.

pub mod config;
pub mod metrics;
pub mod offline;
pub mod online;
pub mod report;
pub mod synth;

pub use config::{Ablation, RunConfig};
pub use metrics::{compute_metrics, MetricsReport};
pub use offline::{offline_train, OfflineModel};
pub use online::{run_online, Engine, Event, RunOutput, StepRecord, Trigger};
pub use report::{emit_report, ReportInputs};
pub use synth::{synth_stream, SynthSpec, SynthStream};

use crate::error::Result;
use crate::ingest::Stream;

/// Outcome of [`run`]: the online run, its metrics and optionally the
/// static-model run over the same steps.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub output: RunOutput,
    pub metrics: MetricsReport,
    pub baseline: Option<RunOutput>,
}

impl Experiment {
    pub fn report_inputs<'a>(&'a self, cfg: &RunConfig, target_names: &'a [String]) -> ReportInputs<'a> {
        ReportInputs {
            records: &self.output.records,
            events: &self.output.events,
            metrics: &self.metrics,
            stats: &self.output.stats,
            target_names,
            window: cfg.detection_window,
            baseline: self.baseline.as_ref().map(|b| b.records.as_slice()),
        }
    }
}

pub fn metrics_for(cfg: &RunConfig, out: &RunOutput) -> MetricsReport {
    compute_metrics(
        &out.records,
        &out.events,
        &out.stats,
        cfg.detection_window,
        &cfg.recovery_thresholds,
    )
}

/// Offline training followed by the online phase. With `baseline` the same
/// offline model is also run with drift and stable branches disabled.
pub fn run(cfg: &RunConfig, raw: &Stream, baseline: bool) -> Result<Experiment> {
    let model = offline_train(cfg, raw)?;
    let baseline = if baseline {
        let mut static_cfg = cfg.clone();
        static_cfg.apply_ablation(Ablation::Static);
        Some(run_online(&static_cfg, model.clone())?)
    } else {
        None
    };
    let output = run_online(cfg, model)?;
    let metrics = metrics_for(cfg, &output);
    Ok(Experiment {
        output,
        metrics,
        baseline,
    })
}
