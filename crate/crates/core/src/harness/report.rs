//! Report files of a run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::metrics::{normalized_abs_error, windowed_normalized_mae, MetricsReport};
use super::online::{Event, StepRecord};
use crate::error::{Error, Result};
use crate::ingest::NormStats;

pub const PREDICTIONS: &str = "predictions.csv";
pub const EVENTS: &str = "events.jsonl";
pub const METRICS: &str = "metrics.json";
pub const ERROR_OVER_TIME: &str = "error_over_time.csv";
pub const DELTA_ERROR_OVER_TIME: &str = "delta_error_over_time.csv";
pub const RECOVERY_HISTOGRAM: &str = "recovery_histogram.csv";

/// Everything [`emit_report`] writes.
pub struct ReportInputs<'a> {
    pub records: &'a [StepRecord],
    pub events: &'a [Event],
    pub metrics: &'a MetricsReport,
    pub stats: &'a NormStats,
    pub target_names: &'a [String],
    /// Window of the windowed error curves.
    pub window: usize,
    /// Records of a static-model run over the same steps, for the
    /// error-difference curve.
    pub baseline: Option<&'a [StepRecord]>,
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Writes predictions, events, metrics and the plot-ready CSVs into `out`.
pub fn emit_report(out: &Path, r: &ReportInputs<'_>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let path = out.join(PREDICTIONS);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["t".to_string()];
    header.extend(r.target_names.iter().map(|n| format!("yhat_{n}")));
    header.extend(r.target_names.iter().map(|n| format!("y_{n}")));
    header.push("released".into());
    w.write_record(&header)?;
    for rec in r.records {
        let mut row = vec![rec.t.to_string()];
        row.extend(rec.yhat.iter().map(|v| format!("{v:?}")));
        match &rec.y {
            Some(y) => row.extend(y.iter().map(|v| format!("{v:?}"))),
            None => row.extend(std::iter::repeat_n(String::new(), r.target_names.len())),
        }
        row.push(u8::from(rec.released).to_string());
        w.write_record(&row)?;
    }
    finish(w, &path)?;

    let path = out.join(EVENTS);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for e in r.events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join(METRICS);
    let mut text = serde_json::to_string_pretty(r.metrics)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let err = normalized_abs_error(r.records, r.stats);
    let wmae = windowed_normalized_mae(r.records, r.stats, r.window);
    let path = out.join(ERROR_OVER_TIME);
    let mut w = csv_writer(&path)?;
    w.write_record(["t", "abs_error", "windowed_mae"])?;
    for ((rec, e), m) in r.records.iter().zip(&err).zip(&wmae) {
        w.write_record([rec.t.to_string(), opt(*e), opt(*m)])?;
    }
    finish(w, &path)?;

    let path = out.join(DELTA_ERROR_OVER_TIME);
    let mut w = csv_writer(&path)?;
    w.write_record(["t", "static_windowed_mae", "windowed_mae", "delta"])?;
    if let Some(base) = r.baseline {
        let bmae = windowed_normalized_mae(base, r.stats, r.window);
        let by_t: std::collections::BTreeMap<usize, Option<f64>> =
            base.iter().zip(bmae).map(|(rec, m)| (rec.t, m)).collect();
        for (rec, m) in r.records.iter().zip(&wmae) {
            let b = by_t.get(&rec.t).copied().flatten();
            let delta = b.zip(*m).map(|(b, m)| b - m);
            w.write_record([rec.t.to_string(), opt(b), opt(*m), opt(delta)])?;
        }
    }
    finish(w, &path)?;

    let path = out.join(RECOVERY_HISTOGRAM);
    let mut w = csv_writer(&path)?;
    w.write_record(["level", "steps", "count"])?;
    for lr in &r.metrics.recovery {
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        let mut never = 0;
        for s in &lr.steps {
            match s {
                Some(s) => *counts.entry(*s).or_default() += 1,
                None => never += 1,
            }
        }
        for (s, c) in counts {
            w.write_record([lr.level.to_string(), s.to_string(), c.to_string()])?;
        }
        if never > 0 {
            w.write_record([lr.level.to_string(), "never".into(), never.to_string()])?;
        }
    }
    finish(w, &path)
}
