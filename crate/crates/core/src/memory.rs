//! Dynamic memory queue: compact backbone summaries kept in a FIFO ring,
//! averaged over the newest `R` items and blended into the current projected
//! feature through a sigmoid gate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, sigmoid, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    dim: usize,
    capacity: usize,
    items: VecDeque<Vec<f64>>,
}

impl MemoryQueue {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        Ok(Self {
            dim,
            capacity,
            items: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items from oldest to newest.
    pub fn items(&self) -> impl DoubleEndedIterator<Item = &[f64]> + ExactSizeIterator {
        self.items.iter().map(Vec::as_slice)
    }

    /// Appends `m` as the newest item, evicting the oldest one at capacity.
    /// Returns the evicted item, if any.
    pub fn push(&mut self, m: Vec<f64>) -> Result<Option<Vec<f64>>> {
        if m.len() != self.dim {
            return Err(Error::dim("memory item", self.dim, m.len()));
        }
        self.items.push_back(m);
        Ok(if self.items.len() > self.capacity {
            self.items.pop_front()
        } else {
            None
        })
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Mean of the `min(r, len)` newest items, or the zero vector when empty.
    pub fn aggregate(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let n = r.min(self.items.len());
        if n == 0 {
            return out;
        }
        for item in self.items.iter().rev().take(n) {
            for (o, v) in out.iter_mut().zip(item) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Gate vector `sigmoid(W_g [z; m] + b_g)`.
pub fn gate(z: &[f64], mbar: &[f64], w_g: &[f64], b_g: &[f64]) -> Vec<f64> {
    let mut concat = Vec::with_capacity(z.len() + mbar.len());
    concat.extend_from_slice(z);
    concat.extend_from_slice(mbar);
    let mut g = vec![0.0; z.len()];
    affine(w_g, b_g, &concat, &mut g);
    g.iter_mut().for_each(|v| *v = sigmoid(*v));
    g
}

/// Gated fusion `g * z + (1 - g) * mbar`.
pub fn fuse(z: &[f64], mbar: &[f64], w_g: &[f64], b_g: &[f64]) -> Vec<f64> {
    fuse_with_gate(z, mbar, w_g, b_g).0
}

/// Gated fusion, also returning the gate.
pub fn fuse_with_gate(z: &[f64], mbar: &[f64], w_g: &[f64], b_g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = gate(z, mbar, w_g, b_g);
    let fused = g
        .iter()
        .zip(z.iter().zip(mbar))
        .map(|(&g, (&z, &m))| g * z + (1.0 - g) * m)
        .collect();
    (fused, g)
}

/// Time-averaged backbone feature of a `channels x L` matrix.
pub fn global_average_pool(h: &Matrix) -> Vec<f64> {
    let inv = 1.0 / h.cols() as f64;
    (0..h.rows())
        .map(|r| h.row(r).iter().sum::<f64>() * inv)
        .collect()
}

/// `ReLU(W_m * pooled + b_m)`.
pub fn memory_item_from_pooled(pooled: &[f64], w_m: &[f64], b_m: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; b_m.len()];
    affine(w_m, b_m, pooled, &mut m);
    m.iter_mut().for_each(|v| *v = v.max(0.0));
    m
}

/// Memory item built from a full backbone feature map `h`.
pub fn make_memory_item(h: &Matrix, w_m: &[f64], b_m: &[f64]) -> Vec<f64> {
    memory_item_from_pooled(&global_average_pool(h), w_m, b_m)
}
