//! Versioned checkpoint of the predictor, optimizer state, normalization
//! statistics and memory queue.
//!
//! The file is JSON; floats are written in shortest round-trip form and parsed
//! with exact rounding, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, Predictor};
use crate::error::{Error, Result};
use crate::ingest::NormStats;
use crate::memory::MemoryQueue;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub predictor: Predictor,
    pub optimizer: Option<AdamW>,
    pub norm_stats: NormStats,
    pub memory: MemoryQueue,
}

impl Checkpoint {
    pub fn new(predictor: Predictor, optimizer: Option<AdamW>, norm_stats: NormStats, memory: MemoryQueue) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            predictor,
            optimizer,
            norm_stats,
            memory,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let all_finite = self
            .predictor
            .params
            .tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let predictor = Predictor::with_params(ck.predictor.arch, ck.predictor.params)?;
        Ok(Self { predictor, ..ck })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
