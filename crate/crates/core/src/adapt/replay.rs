//! FIFO store of labeled history, separate from the memory queue.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// One labeled sample: its time, normalized feature row and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<ReplayRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            records: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record, returning the evicted oldest one when full.
    pub fn push(&mut self, record: ReplayRecord) -> Option<ReplayRecord> {
        if self.capacity == 0 {
            return Some(record);
        }
        let evicted = if self.records.len() == self.capacity {
            self.records.pop_front()
        } else {
            None
        };
        self.records.push_back(record);
        evicted
    }

    /// Oldest first.
    pub fn records(&self) -> impl ExactSizeIterator<Item = &ReplayRecord> + DoubleEndedIterator {
        self.records.iter()
    }

    pub fn get(&self, i: usize) -> Option<&ReplayRecord> {
        self.records.get(i)
    }
}
