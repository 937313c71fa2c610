//! Trend-aware joint loss over a time-ordered block of `H` predictions.
//!
//! Blocks are slices of rows, one row of `K` targets per time step, oldest
//! first. Every term has an analytic gradient with respect to the predictions.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub trend: f64,
    pub diff: f64,
    pub vol: f64,
}

impl LossWeights {
    /// Plain MSE.
    pub const MSE_ONLY: LossWeights = LossWeights {
        trend: 0.0,
        diff: 0.0,
        vol: 0.0,
    };
}

fn width(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> usize {
    assert_eq!(yhat.len(), y.len(), "prediction and label blocks differ in length");
    yhat.first().map_or(0, |r| r.len())
}

/// Mean squared error over the whole `H x K` block.
pub fn mse_loss(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let k = width(yhat, y);
    if yhat.is_empty() || k == 0 {
        return 0.0;
    }
    let sse: f64 = yhat
        .iter()
        .zip(y)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)))
        .sum();
    sse / (yhat.len() * k) as f64
}

/// Mean squared mismatch of first differences.
pub fn trend_loss(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let k = width(yhat, y);
    let h = yhat.len();
    if h < 2 {
        log::warn!("trend term needs at least 2 steps, got {h}; using 0");
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 1..h {
        for j in 0..k {
            let e = (yhat[i][j] - yhat[i - 1][j]) - (y[i][j] - y[i - 1][j]);
            sum += e * e;
        }
    }
    sum / ((h - 1) * k) as f64
}

/// Mean squared mismatch of second differences.
pub fn diff_loss(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let k = width(yhat, y);
    let h = yhat.len();
    if h < 3 {
        log::warn!("difference term needs at least 3 steps, got {h}; using 0");
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 2..h {
        for j in 0..k {
            let e = second_diff(yhat, i, j) - second_diff(y, i, j);
            sum += e * e;
        }
    }
    sum / ((h - 2) * k) as f64
}

fn second_diff(s: &[Vec<f64>], i: usize, j: usize) -> f64 {
    s[i][j] - 2.0 * s[i - 1][j] + s[i - 2][j]
}

fn column_mean_var(s: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().map(|r| r[j]).sum::<f64>() / n;
    let var = s.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Mean over targets of the squared gap between population variances.
pub fn vol_loss(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let k = width(yhat, y);
    let h = yhat.len();
    if h < 2 {
        log::warn!("volatility term needs at least 2 steps, got {h}; using 0");
        return 0.0;
    }
    let mut sum = 0.0;
    for j in 0..k {
        let d = column_mean_var(yhat, j).1 - column_mean_var(y, j).1;
        sum += d * d;
    }
    sum / k as f64
}

pub fn joint_loss(yhat: &[Vec<f64>], y: &[Vec<f64>], w: &LossWeights) -> f64 {
    joint_loss_and_grad(yhat, y, w).0
}

/// Joint loss and its gradient with respect to every prediction in the block.
/// Degenerate terms (too few steps) contribute zero without a warning.
pub fn joint_loss_and_grad(yhat: &[Vec<f64>], y: &[Vec<f64>], w: &LossWeights) -> (f64, Vec<Vec<f64>>) {
    let k = width(yhat, y);
    let h = yhat.len();
    let mut grad = vec![vec![0.0; k]; h];
    if h == 0 || k == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;

    let c = 1.0 / (h * k) as f64;
    for i in 0..h {
        for j in 0..k {
            let r = yhat[i][j] - y[i][j];
            loss += c * r * r;
            grad[i][j] += 2.0 * c * r;
        }
    }

    if w.trend != 0.0 && h >= 2 {
        let c = w.trend / ((h - 1) * k) as f64;
        for i in 1..h {
            for j in 0..k {
                let e = (yhat[i][j] - yhat[i - 1][j]) - (y[i][j] - y[i - 1][j]);
                loss += c * e * e;
                grad[i][j] += 2.0 * c * e;
                grad[i - 1][j] -= 2.0 * c * e;
            }
        }
    }

    if w.diff != 0.0 && h >= 3 {
        let c = w.diff / ((h - 2) * k) as f64;
        for i in 2..h {
            for j in 0..k {
                let e = second_diff(yhat, i, j) - second_diff(y, i, j);
                loss += c * e * e;
                grad[i][j] += 2.0 * c * e;
                grad[i - 1][j] -= 4.0 * c * e;
                grad[i - 2][j] += 2.0 * c * e;
            }
        }
    }

    if w.vol != 0.0 && h >= 2 {
        let c = w.vol / k as f64;
        let n = h as f64;
        for j in 0..k {
            let (mean, var) = column_mean_var(yhat, j);
            let d = var - column_mean_var(y, j).1;
            loss += c * d * d;
            for (i, row) in yhat.iter().enumerate() {
                grad[i][j] += 2.0 * c * d * 2.0 * (row[j] - mean) / n;
            }
        }
    }
    (loss, grad)
}

/// Splits `n` time-ordered items into consecutive blocks of `horizon`. A
/// short remainder (fewer than 3 items) is merged into the previous block so
/// that higher-order terms stay defined whenever possible.
pub fn block_ranges(n: usize, horizon: usize) -> Vec<std::ops::Range<usize>> {
    let horizon = horizon.max(1);
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(horizon)
        .map(|s| s..(s + horizon).min(n))
        .collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() < 3) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().end = tail.end;
    }
    out
}

/// Length-weighted joint loss over consecutive blocks of a time-ordered
/// sequence, with the gradient for every row.
pub fn blocked_loss_and_grad(
    yhat: &[Vec<f64>],
    y: &[Vec<f64>],
    w: &LossWeights,
    horizon: usize,
) -> (f64, Vec<Vec<f64>>) {
    let n = yhat.len();
    let mut grad = Vec::with_capacity(n);
    let mut loss = 0.0;
    for r in block_ranges(n, horizon) {
        let share = r.len() as f64 / n as f64;
        let (l, g) = joint_loss_and_grad(&yhat[r.clone()], &y[r], w);
        loss += share * l;
        grad.extend(g.into_iter().map(|row| row.into_iter().map(|v| v * share).collect::<Vec<_>>()));
    }
    (loss, grad)
}
