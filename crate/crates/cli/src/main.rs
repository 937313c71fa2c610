use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use driftwise::harness::metrics::error_metrics;
use driftwise::harness::synth::write_csv;
use driftwise::harness::{emit_report, run, synth_stream, Ablation, RunConfig, SynthSpec};
use driftwise::ingest::{load_csv, Schema};

/// Streaming simulator for drift-aware online regression.
#[derive(Debug, Parser)]
#[command(name = "driftwise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train offline, replay the rest of the stream online and write a report.
    Run {
        /// Flat `key = value` config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// full, static, no_memory, no_drift, no_stable, mse_only, short_only or long_only.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Skip the static-model run used for the error-difference curve.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Generate a piecewise-stationary stream from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// CSV destination; the schema is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute error metrics from a predictions file.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            data,
            schema,
            out,
            seed,
            ablation,
            no_baseline,
        } => run_cmd(config.as_deref(), &data, &schema, &out, seed, ablation, no_baseline),
        Command::Synth { spec, out, seed } => synth_cmd(&spec, &out, seed),
        Command::Metrics { pred } => metrics_cmd(&pred),
    }
}

fn run_cmd(
    config: Option<&Path>,
    data: &Path,
    schema: &Path,
    out: &Path,
    seed: Option<u64>,
    ablation: Option<Ablation>,
    no_baseline: bool,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.apply_ablation(a);
    }
    cfg.validate()?;
    let schema = Schema::load(schema).with_context(|| format!("loading schema {}", schema.display()))?;
    let stream = load_csv(data, &schema, cfg.latency).with_context(|| format!("loading {}", data.display()))?;
    log::info!("{} samples, {} features, {} targets", stream.len(), stream.n_features(), stream.n_targets());

    let baseline = !no_baseline && ablation != Some(Ablation::Static);
    let ex = run(&cfg, &stream, baseline)?;
    emit_report(out, &ex.report_inputs(&cfg, &stream.target_names))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_flat_string()).with_context(|| format!("writing {}", config_path.display()))?;

    let m = &ex.metrics.accuracy;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} online steps: NMSE {} NMAE {} R2 {}; {} drift events, {} stable triggers; report in {}",
        m.n,
        show(m.nmse),
        show(m.nmae),
        show(m.mean_r2),
        ex.metrics.drift.detections,
        ex.metrics.drift.stable_triggers,
        out.display()
    );
    Ok(())
}

fn synth_cmd(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let spec = SynthSpec::load(spec_path).with_context(|| format!("loading spec {}", spec_path.display()))?;
    let seed = seed.unwrap_or(spec.seed);
    let s = synth_stream(&spec, seed, RunConfig::default().latency)?;
    write_csv(&s.stream, out)?;
    let schema_path = out.with_extension("schema.toml");
    std::fs::write(&schema_path, spec.schema().to_toml())
        .with_context(|| format!("writing {}", schema_path.display()))?;
    println!(
        "{} samples written to {}, schema in {}, drift points {:?}",
        s.stream.len(),
        out.display(),
        schema_path.display(),
        s.drift_points
    );
    Ok(())
}

/// Reads `t, yhat_*, y_*, released` rows and scores the released ones, or
/// every row with ground truth when there is no `released` column.
fn metrics_cmd(path: &Path) -> Result<()> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let yhat_cols: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("yhat_")).collect();
    let y_cols: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("y_")).collect();
    let released = headers.iter().position(|h| h == "released");
    if yhat_cols.is_empty() || yhat_cols.len() != y_cols.len() {
        bail!("{}: expected matching yhat_* and y_* columns", path.display());
    }
    let (mut yhat, mut y) = (Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if released.is_some_and(|c| rec[c].trim() != "1") {
            continue;
        }
        let parse = |cols: &[usize]| -> Result<Option<Vec<f64>>> {
            if cols.iter().any(|&c| rec[c].trim().is_empty()) {
                return Ok(None);
            }
            let v = cols
                .iter()
                .map(|&c| rec[c].trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("row {}: bad number", row + 2))?;
            Ok(Some(v))
        };
        if let (Some(p), Some(t)) = (parse(&yhat_cols)?, parse(&y_cols)?) {
            yhat.push(p);
            y.push(t);
        }
    }
    println!("{}", serde_json::to_string_pretty(&error_metrics(&yhat, &y))?);
    Ok(())
}
