//! Drift-aware online learning for nonstationary multivariate time-series
//! regression.
//!
//! The online loop follows a detect, fine-tune, predict order at every step:
//! an MMD statistic over projected features decides whether (and how hard)
//! to adapt, a hierarchical fine-tuning routine updates the predictor on an
//! adaptation set assembled from delayed labels, and only then is the next
//! prediction made. A second, error-driven branch recalibrates the head when
//! no drift is detected but the smoothed error stays high.

pub mod error;
pub mod ingest;
pub mod linalg;
pub mod memory;
pub mod drift;
pub mod predictor;
pub mod adapt;
pub mod stable;
pub mod harness;

pub use error::{Error, Result};
