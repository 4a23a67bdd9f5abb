//! Bounded FIFO of negative-sample snapshots from recent batches.

use std::collections::{HashSet, VecDeque};

use serde::Serialize;

use crate::graph::{NodeId, NodeType, RelationId};

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    /// Global node id.
    pub node: NodeId,
    pub relation: RelationId,
    pub target_type: NodeType,
    pub batch: u64,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NegativeQueue {
    capacity: usize,
    span: u64,
    entries: VecDeque<QueueEntry>,
    evicted: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct QueueFill {
    pub len: usize,
    pub capacity: usize,
}

impl NegativeQueue {
    /// `span` is the number of most recent batches whose entries stay
    /// eligible (at least 1).
    pub fn new(capacity: usize, span: usize) -> Self {
        NegativeQueue {
            capacity,
            span: span.max(1) as u64,
            entries: VecDeque::with_capacity(capacity),
            evicted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn fill(&self) -> QueueFill {
        QueueFill {
            len: self.len(),
            capacity: self.capacity,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, entry: QueueEntry) {
        if self.capacity == 0 {
            self.evicted += 1;
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
            self.evicted += 1;
        }
        self.entries.push_back(entry);
    }

    /// Pushes one batch's entries, keeping the first of any repeated
    /// `(node, relation)` pair, then drops entries older than the span.
    pub fn push_batch(&mut self, batch: u64, entries: impl IntoIterator<Item = QueueEntry>) {
        let mut seen = HashSet::new();
        for mut e in entries {
            if seen.insert((e.node, e.relation)) {
                e.batch = batch;
                self.push(e);
            }
        }
        self.expire(batch + 1);
    }

    /// Drops entries that are outside the span as seen from batch `current`.
    pub fn expire(&mut self, current: u64) {
        let before = self.entries.len();
        let span = self.span;
        self.entries.retain(|e| e.batch + span >= current);
        self.evicted += (before - self.entries.len()) as u64;
    }

    /// Entries from the `span` batches before `current` that match
    /// `(relation, target_type)`.
    pub fn matching(
        &self,
        relation: RelationId,
        target_type: NodeType,
        current: u64,
    ) -> impl Iterator<Item = &QueueEntry> {
        let span = self.span;
        self.entries.iter().filter(move |e| {
            e.relation == relation
                && e.target_type == target_type
                && e.batch < current
                && e.batch + span >= current
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(node: NodeId, batch: u64) -> QueueEntry {
        QueueEntry {
            node,
            relation: RelationId(0),
            target_type: NodeType(1),
            batch,
            embedding: vec![node as f64],
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut q = NegativeQueue::new(256, 1);
        for i in 0..300 {
            q.push(entry(i, 0));
        }
        assert_eq!(q.len(), 256);
        assert_eq!(q.evicted(), 44);
        assert_eq!(q.entries().next().unwrap().node, 44);
    }

    #[test]
    fn stale_batches_never_match() {
        let span = 3;
        let mut q = NegativeQueue::new(1000, span);
        for b in 0..(2 * span as u64 + 4) {
            let got: Vec<u64> = q.matching(RelationId(0), NodeType(1), b).map(|e| e.batch).collect();
            assert!(got.iter().all(|&x| x < b && x + span as u64 >= b), "batch {b}: {got:?}");
            if b >= span as u64 {
                assert_eq!(got.len(), span * 2);
            }
            q.push_batch(b, (0..2).map(|i| entry(i + 10 * b as usize, 0)));
            assert!(q.len() <= span * 2);
        }
    }

    #[test]
    fn repeated_pairs_pushed_once() {
        let mut q = NegativeQueue::new(10, 1);
        q.push_batch(0, [entry(1, 0), entry(1, 0), entry(2, 0)]);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn filters_by_relation_and_type() {
        let mut q = NegativeQueue::new(10, 1);
        let mut other = entry(5, 0);
        other.target_type = NodeType(2);
        q.push_batch(0, [entry(1, 0), other]);
        assert_eq!(q.matching(RelationId(0), NodeType(1), 1).count(), 1);
        assert_eq!(q.matching(RelationId(1), NodeType(1), 1).count(), 0);
    }
}
