//! Run configuration: defaults, a flat `key = value` file format and
//! ablation switches.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::LevelConfig;
use crate::drift::Thresholds;
use crate::error::{Error, Result};
use crate::ingest::Latency;
use crate::predictor::{AdamWConfig, Architecture, Branches};
use crate::stable::StableConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Predictor input window `L`.
    pub window: usize,
    /// Projection channels `C`.
    pub channels: usize,
    pub offline_size: usize,
    pub batch_size: usize,
    /// Memory queue capacity `T_m`.
    pub memory_capacity: usize,
    /// Memory aggregation length `R`.
    pub memory_agg: usize,
    /// Detection window `L_w`.
    pub detection_window: usize,
    pub cooldown: usize,
    pub thresholds: Thresholds,
    pub n_init: usize,
    /// Sequence length `H` of the joint loss.
    pub horizon: usize,
    pub n_ft: usize,
    pub n_buf: usize,
    pub tau_h: f64,
    pub levels: [LevelConfig; 3],
    pub stable: StableConfig,
    pub latency: Latency,
    pub seed: u64,
    pub base_lr: f64,
    pub adam: AdamWConfig,
    pub offline_epochs: usize,
    pub offline_patience: usize,
    pub offline_val_split: f64,
    /// Windowed normalized-MAE thresholds that end recovery, per level.
    pub recovery_thresholds: [f64; 3],
    pub memory_fusion: bool,
    pub drift_enabled: bool,
    pub stable_enabled: bool,
    /// When false every fine-tuning run uses plain MSE.
    pub joint_loss: bool,
    pub branches: Branches,
    /// Adds wall-clock durations to fine-tune events (breaks byte-identical logs).
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: 12,
            channels: 32,
            offline_size: 1500,
            batch_size: 32,
            memory_capacity: 4,
            memory_agg: 4,
            detection_window: 5,
            cooldown: 3,
            thresholds: Thresholds::default(),
            n_init: 3,
            horizon: 8,
            n_ft: 300,
            n_buf: 800,
            tau_h: 0.05,
            levels: [1, 2, 3].map(|l| LevelConfig::defaults(l).expect("built-in level")),
            stable: StableConfig::default(),
            latency: Latency::Steps(12),
            seed: 0,
            base_lr: 1e-3,
            adam: AdamWConfig::default(),
            offline_epochs: 200,
            offline_patience: 20,
            offline_val_split: 0.15,
            recovery_thresholds: [0.10, 0.125, 0.15],
            memory_fusion: true,
            drift_enabled: true,
            stable_enabled: true,
            joint_loss: true,
            branches: Branches::Both,
            record_wall_time: false,
        }
    }
}

/// Named component switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No drift branch and no stable branch: the offline model as is.
    Static,
    NoMemory,
    NoDrift,
    NoStable,
    MseOnly,
    ShortOnly,
    LongOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::Static,
        Ablation::NoMemory,
        Ablation::NoDrift,
        Ablation::NoStable,
        Ablation::MseOnly,
        Ablation::ShortOnly,
        Ablation::LongOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Static => "static",
            Ablation::NoMemory => "no_memory",
            Ablation::NoDrift => "no_drift",
            Ablation::NoStable => "no_stable",
            Ablation::MseOnly => "mse_only",
            Ablation::ShortOnly => "short_only",
            Ablation::LongOnly => "long_only",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| Error::Config(format!("`{key}` must be a non-negative integer")))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        _ => Err(Error::Config(format!("`{key}` must be a number"))),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("`{key}` must be true or false")))
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        "\"inf\"".into()
    } else {
        format!("{v:?}")
    }
}

impl RunConfig {
    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Full => {}
            Ablation::Static => {
                self.drift_enabled = false;
                self.stable_enabled = false;
            }
            Ablation::NoMemory => self.memory_fusion = false,
            Ablation::NoDrift => self.drift_enabled = false,
            Ablation::NoStable => self.stable_enabled = false,
            Ablation::MseOnly => self.joint_loss = false,
            Ablation::ShortOnly => self.branches = Branches::ShortOnly,
            Ablation::LongOnly => self.branches = Branches::LongOnly,
        }
    }

    pub fn architecture(&self, features: usize, targets: usize) -> Architecture {
        let mut a = Architecture::new(features, self.channels, targets, self.window, self.memory_agg);
        a.memory_fusion = self.memory_fusion;
        a.branches = self.branches;
        a
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.window == 0 || self.channels == 0 || self.batch_size == 0 || self.detection_window == 0 {
            return fail("window, channels, batch_size and detection_window must be positive");
        }
        if self.memory_agg == 0 || self.memory_agg > self.memory_capacity {
            return fail("memory_agg must be in 1..=memory_capacity");
        }
        if self.offline_size < 2 * self.window.max(self.detection_window) {
            return fail("offline_size must cover at least two input windows");
        }
        if self.horizon == 0 {
            return fail("horizon must be positive");
        }
        if !(self.tau_h > 0.0) || !(self.base_lr > 0.0) {
            return fail("tau_h and base_lr must be positive");
        }
        if !(self.offline_val_split > 0.0 && self.offline_val_split < 1.0) {
            return fail("offline_val_split must be in (0, 1)");
        }
        if self.recovery_thresholds.iter().any(|v| !(*v > 0.0)) {
            return fail("recovery thresholds must be positive");
        }
        self.thresholds.validate()?;
        for l in &self.levels {
            l.validate()?;
        }
        self.stable.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        if let Some((level, field)) = key.strip_prefix("level").and_then(|r| r.split_once('_')) {
            let i = match level {
                "1" => 0,
                "2" => 1,
                "3" => 2,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            };
            let l = &mut self.levels[i];
            match field {
                "lr_scale" => l.lr_scale = as_f64(key, v)?,
                "epochs" => l.max_epochs = as_usize(key, v)?,
                "patience" => l.patience = as_usize(key, v)?,
                "val_split" => l.val_split = as_f64(key, v)?,
                "lower_lr_multiplier" => l.lower_lr_multiplier = as_f64(key, v)?,
                "l2sp" => l.l2sp_coeff = as_f64(key, v)?,
                "w_trend" => l.weights.trend = as_f64(key, v)?,
                "w_diff" => l.weights.diff = as_f64(key, v)?,
                "w_vol" => l.weights.vol = as_f64(key, v)?,
                "epsilon" => l.epsilon = as_f64(key, v)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "window" => self.window = as_usize(key, v)?,
            "channels" => self.channels = as_usize(key, v)?,
            "offline_size" => self.offline_size = as_usize(key, v)?,
            "batch_size" => self.batch_size = as_usize(key, v)?,
            "memory_capacity" => self.memory_capacity = as_usize(key, v)?,
            "memory_agg" => self.memory_agg = as_usize(key, v)?,
            "detection_window" => self.detection_window = as_usize(key, v)?,
            "cooldown" => self.cooldown = as_usize(key, v)?,
            "lambda_mild" => self.thresholds.mild = as_f64(key, v)?,
            "lambda_moderate" => self.thresholds.moderate = as_f64(key, v)?,
            "lambda_severe" => self.thresholds.severe = as_f64(key, v)?,
            "n_init" => self.n_init = as_usize(key, v)?,
            "horizon" => self.horizon = as_usize(key, v)?,
            "n_ft" => self.n_ft = as_usize(key, v)?,
            "n_buf" => self.n_buf = as_usize(key, v)?,
            "tau_h" => self.tau_h = as_f64(key, v)?,
            "stable_lambda" => self.stable.lambda = as_f64(key, v)?,
            "stable_tau" => self.stable.tau = as_f64(key, v)?,
            "stable_consecutive" => self.stable.consecutive = as_usize(key, v)?,
            "stable_lr_scale" => self.stable.lr_scale = as_f64(key, v)?,
            "stable_iterations" => self.stable.iterations = as_usize(key, v)?,
            "latency" => {
                self.latency = match v {
                    toml::Value::String(s) if s == "inf" || s == "never" => Latency::Never,
                    _ => Latency::Steps(as_usize(key, v)?),
                }
            }
            "seed" => {
                self.seed = v
                    .as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| Error::Config("`seed` must be a non-negative integer".into()))?
            }
            "base_lr" => self.base_lr = as_f64(key, v)?,
            "adam_beta1" => self.adam.beta1 = as_f64(key, v)?,
            "adam_beta2" => self.adam.beta2 = as_f64(key, v)?,
            "adam_eps" => self.adam.eps = as_f64(key, v)?,
            "weight_decay" => self.adam.weight_decay = as_f64(key, v)?,
            "offline_epochs" => self.offline_epochs = as_usize(key, v)?,
            "offline_patience" => self.offline_patience = as_usize(key, v)?,
            "offline_val_split" => self.offline_val_split = as_f64(key, v)?,
            "recovery_mild" => self.recovery_thresholds[0] = as_f64(key, v)?,
            "recovery_moderate" => self.recovery_thresholds[1] = as_f64(key, v)?,
            "recovery_severe" => self.recovery_thresholds[2] = as_f64(key, v)?,
            "memory_fusion" => self.memory_fusion = as_bool(key, v)?,
            "drift_enabled" => self.drift_enabled = as_bool(key, v)?,
            "stable_enabled" => self.stable_enabled = as_bool(key, v)?,
            "joint_loss" => self.joint_loss = as_bool(key, v)?,
            "record_wall_time" => self.record_wall_time = as_bool(key, v)?,
            "branches" => {
                self.branches = match v.as_str() {
                    Some("both") => Branches::Both,
                    Some("short") => Branches::ShortOnly,
                    Some("long") => Branches::LongOnly,
                    _ => return Err(Error::Config("`branches` must be \"both\", \"short\" or \"long\"".into())),
                }
            }
            "ablation" => {
                let name = v
                    .as_str()
                    .ok_or_else(|| Error::Config("`ablation` must be a string".into()))?;
                self.apply_ablation(name.parse()?);
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` document on top of the defaults.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        let mut cfg = RunConfig::default();
        for (k, v) in &table {
            if v.is_table() {
                return Err(Error::Config(format!("`{k}`: nested tables are not supported")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat_str(&text)
    }

    /// Every setting in the flat format; parses back to an equal config.
    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("window", self.window.to_string());
        line("channels", self.channels.to_string());
        line("offline_size", self.offline_size.to_string());
        line("batch_size", self.batch_size.to_string());
        line("memory_capacity", self.memory_capacity.to_string());
        line("memory_agg", self.memory_agg.to_string());
        line("detection_window", self.detection_window.to_string());
        line("cooldown", self.cooldown.to_string());
        line("lambda_mild", fmt_f64(self.thresholds.mild));
        line("lambda_moderate", fmt_f64(self.thresholds.moderate));
        line("lambda_severe", fmt_f64(self.thresholds.severe));
        line("n_init", self.n_init.to_string());
        line("horizon", self.horizon.to_string());
        line("n_ft", self.n_ft.to_string());
        line("n_buf", self.n_buf.to_string());
        line("tau_h", fmt_f64(self.tau_h));
        for (i, l) in self.levels.iter().enumerate() {
            let p = format!("level{}_", i + 1);
            line(&format!("{p}lr_scale"), fmt_f64(l.lr_scale));
            line(&format!("{p}epochs"), l.max_epochs.to_string());
            line(&format!("{p}patience"), l.patience.to_string());
            line(&format!("{p}val_split"), fmt_f64(l.val_split));
            line(&format!("{p}lower_lr_multiplier"), fmt_f64(l.lower_lr_multiplier));
            line(&format!("{p}l2sp"), fmt_f64(l.l2sp_coeff));
            line(&format!("{p}w_trend"), fmt_f64(l.weights.trend));
            line(&format!("{p}w_diff"), fmt_f64(l.weights.diff));
            line(&format!("{p}w_vol"), fmt_f64(l.weights.vol));
            line(&format!("{p}epsilon"), fmt_f64(l.epsilon));
        }
        line("stable_lambda", fmt_f64(self.stable.lambda));
        line("stable_tau", fmt_f64(self.stable.tau));
        line("stable_consecutive", self.stable.consecutive.to_string());
        line("stable_lr_scale", fmt_f64(self.stable.lr_scale));
        line("stable_iterations", self.stable.iterations.to_string());
        line(
            "latency",
            match self.latency {
                Latency::Steps(n) => n.to_string(),
                Latency::Never => "\"inf\"".into(),
            },
        );
        line("seed", self.seed.to_string());
        line("base_lr", fmt_f64(self.base_lr));
        line("adam_beta1", fmt_f64(self.adam.beta1));
        line("adam_beta2", fmt_f64(self.adam.beta2));
        line("adam_eps", fmt_f64(self.adam.eps));
        line("weight_decay", fmt_f64(self.adam.weight_decay));
        line("offline_epochs", self.offline_epochs.to_string());
        line("offline_patience", self.offline_patience.to_string());
        line("offline_val_split", fmt_f64(self.offline_val_split));
        line("recovery_mild", fmt_f64(self.recovery_thresholds[0]));
        line("recovery_moderate", fmt_f64(self.recovery_thresholds[1]));
        line("recovery_severe", fmt_f64(self.recovery_thresholds[2]));
        line("memory_fusion", self.memory_fusion.to_string());
        line("drift_enabled", self.drift_enabled.to_string());
        line("stable_enabled", self.stable_enabled.to_string());
        line("joint_loss", self.joint_loss.to_string());
        line("record_wall_time", self.record_wall_time.to_string());
        line(
            "branches",
            match self.branches {
                Branches::Both => "\"both\"",
                Branches::ShortOnly => "\"short\"",
                Branches::LongOnly => "\"long\"",
            }
            .into(),
        );
        s
    }
}
