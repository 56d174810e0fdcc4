//! Bounded FIFO of past item tables, kept for unlearning.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: usize,
    pub table: EmbeddingTable,
}

#[derive(Debug, Clone)]
pub struct SnapshotStore {
    capacity: usize,
    items: VecDeque<Snapshot>,
}

impl SnapshotStore {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("snapshot capacity must be at least 1".into()));
        }
        Ok(SnapshotStore {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
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

    /// Adds a copy; the oldest snapshot is evicted when full. Rounds must
    /// be strictly increasing.
    pub fn push(&mut self, round: usize, table: &EmbeddingTable) -> Result<()> {
        if let Some(last) = self.items.back() {
            if round <= last.round {
                return Err(Error::InvalidArgument(format!(
                    "snapshot round {round} is not after {}",
                    last.round
                )));
            }
            if last.table.rows() != table.rows() || last.table.dim() != table.dim() {
                return Err(Error::Shape("snapshot table shape changed".into()));
            }
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(Snapshot {
            round,
            table: table.clone(),
        });
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Snapshot> {
        self.items.iter()
    }

    pub fn rounds(&self) -> Vec<usize> {
        self.items.iter().map(|s| s.round).collect()
    }

    pub fn bytes(&self) -> usize {
        self.items
            .iter()
            .map(|s| s.table.rows() * s.table.dim() * std::mem::size_of::<f64>())
            .sum()
    }
}
