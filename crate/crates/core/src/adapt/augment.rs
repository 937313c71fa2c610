//! Synthetic variants of labeled windows: temporal resampling and Gaussian
//! perturbation. Windows are `F x L` matrices (one feature per row, time
//! along columns); labels are copied unchanged by the callers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleOp {
    /// Midpoint upsampling by 2 followed by decimation at the odd phase.
    LinearInterp,
    /// Width-2 stride-1 average pool, mapped back onto the original grid by
    /// linear interpolation with flat ends.
    Pooling,
    /// `[0.25, 0.5, 0.25]` smoothing with edge replication.
    Antialias,
}

impl ResampleOp {
    pub const ALL: [ResampleOp; 3] = [ResampleOp::LinearInterp, ResampleOp::Pooling, ResampleOp::Antialias];

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }
}

/// Same-length variant of a series. Series shorter than 2 are returned as is.
pub fn resample_series(x: &[f64], op: ResampleOp) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        log::warn!("series of length {n} is too short to resample; left unchanged");
        return x.to_vec();
    }
    match op {
        ResampleOp::LinearInterp => {
            // Odd samples of [x0, (x0+x1)/2, x1, ..., x_{n-1}, x_{n-1}].
            let mut out: Vec<f64> = x.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            out.push(x[n - 1]);
            out
        }
        ResampleOp::Pooling => {
            let pooled: Vec<f64> = x.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            // pooled[i] sits at position i + 0.5.
            (0..n)
                .map(|i| {
                    if i == 0 {
                        pooled[0]
                    } else if i == n - 1 {
                        pooled[n - 2]
                    } else {
                        0.5 * (pooled[i - 1] + pooled[i])
                    }
                })
                .collect()
        }
        ResampleOp::Antialias => (0..n)
            .map(|i| {
                let prev = x[i.saturating_sub(1)];
                let next = x[(i + 1).min(n - 1)];
                0.25 * prev + 0.5 * x[i] + 0.25 * next
            })
            .collect(),
    }
}

/// Applies `op` to every feature row.
pub fn resample_window(window: &Matrix, op: ResampleOp) -> Matrix {
    let mut out = window.clone();
    for r in 0..window.rows() {
        let v = resample_series(window.row(r), op);
        out.row_mut(r).copy_from_slice(&v);
    }
    out
}

/// `z + eps * xi` with `xi ~ N(0, diag(var))`.
pub fn perturb<R: Rng + ?Sized>(z: &[f64], eps: f64, var: &[f64], rng: &mut R) -> Vec<f64> {
    debug_assert_eq!(z.len(), var.len());
    z.iter()
        .zip(var)
        .map(|(&v, &s2)| {
            let xi: f64 = StandardNormal.sample(rng);
            v + eps * s2.sqrt() * xi
        })
        .collect()
}

/// Perturbs every column of an `F x L` window with independent noise.
pub fn perturb_window<R: Rng + ?Sized>(window: &Matrix, eps: f64, var: &[f64], rng: &mut R) -> Matrix {
    let mut out = window.clone();
    for c in 0..window.cols() {
        let col = perturb(&window.column(c), eps, var, rng);
        out.set_column(c, &col);
    }
    out
}

/// Per-dimension population variance of `rows`, or unit variance when fewer
/// than two rows are available.
pub fn diagonal_variance(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    if rows.len() < 2 {
        log::warn!("fewer than 2 samples to estimate perturbation variance; using identity");
        return vec![1.0; dim];
    }
    (0..dim)
        .map(|d| {
            let col: Vec<f64> = rows.iter().map(|r| r[d]).collect();
            crate::linalg::population_variance(&col)
        })
        .collect()
}
