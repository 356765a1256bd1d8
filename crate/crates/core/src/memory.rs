//! Cross-batch memory: a FIFO queue of recent training features used as
//! extra hard-negative candidates for the triplet loss.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::network::Domain;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    /// Source identity or target pseudo label (not offset).
    pub label: usize,
    pub domain: Domain,
    /// Epoch the label was valid in; pseudo labels are renumbered every epoch.
    pub epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
    enqueued: u64,
}

impl MemoryQueue {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity), enqueued: 0 }
    }

    /// Capacity `round(ratio · (num_source + num_target))`; ratio 0 disables the queue.
    pub fn configure(ratio: f64, num_source: usize, num_target: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(invalid(format!("memory ratio must lie in [0, 1], got {ratio}")));
        }
        let capacity = libm::round(ratio * (num_source + num_target) as f64) as usize;
        Ok(Self::with_capacity(capacity))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of entries ever offered to the queue.
    pub fn total_enqueued(&self) -> u64 {
        self.enqueued
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&MemoryEntry> {
        self.entries.get(i)
    }

    /// Appends one row of `features` (`labels.len()` rows of width `dim`) per
    /// label and evicts the oldest entries beyond capacity.
    pub fn enqueue_batch(&mut self, features: &[f64], dim: usize, labels: &[usize], domains: &[Domain], epoch: usize) -> Result<()> {
        if dim == 0 || features.len() != labels.len() * dim || domains.len() != labels.len() {
            return Err(Error::Dimension {
                op: "enqueue_batch",
                left: alloc::vec![features.len()],
                right: alloc::vec![labels.len(), dim],
            });
        }
        self.enqueued += labels.len() as u64;
        if self.capacity == 0 {
            return Ok(());
        }
        for (i, (&label, &domain)) in labels.iter().zip(domains).enumerate() {
            self.entries.push_back(MemoryEntry {
                feature: features[i * dim..(i + 1) * dim].to_vec(),
                label,
                domain,
                epoch,
            });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Indices of entries that are valid negatives for an anchor.
    ///
    /// Entries from the other domain always qualify. Same-domain entries
    /// qualify when their label differs, except that target entries from an
    /// earlier epoch are skipped because their pseudo labels are stale.
    pub fn negatives_for(&self, anchor_label: usize, anchor_domain: Domain, epoch: usize) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| is_negative(e, anchor_label, anchor_domain, epoch))
            .map(|(i, _)| i)
            .collect()
    }
}

fn is_negative(e: &MemoryEntry, label: usize, domain: Domain, epoch: usize) -> bool {
    if e.domain != domain {
        return true;
    }
    if domain == Domain::Target && e.epoch != epoch {
        return false;
    }
    e.label != label
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn rows(ids: &[usize]) -> Vec<f64> {
        ids.iter().flat_map(|&i| [i as f64, -(i as f64)]).collect()
    }

    #[test]
    fn capacity_from_ratio() {
        assert_eq!(MemoryQueue::configure(0.0, 100, 60).unwrap().capacity(), 0);
        assert_eq!(MemoryQueue::configure(1.0, 100, 60).unwrap().capacity(), 160);
        assert_eq!(MemoryQueue::configure(0.5, 100, 60).unwrap().capacity(), 80);
        assert!(MemoryQueue::configure(-0.1, 100, 60).is_err());
    }

    #[test]
    fn fifo_keeps_last_entries() {
        let mut q = MemoryQueue::with_capacity(4);
        let d = [Domain::Source; 3];
        q.enqueue_batch(&rows(&[0, 1, 2]), 2, &[0, 1, 2], &d, 1).unwrap();
        q.enqueue_batch(&rows(&[3, 4, 5]), 2, &[3, 4, 5], &d, 1).unwrap();
        let labels: Vec<usize> = q.entries().map(|e| e.label).collect();
        assert_eq!(labels, vec![2, 3, 4, 5]);
        assert_eq!(q.total_enqueued(), 6);
    }

    #[test]
    fn zero_capacity_is_noop() {
        let mut q = MemoryQueue::with_capacity(0);
        q.enqueue_batch(&rows(&[0, 1]), 2, &[0, 1], &[Domain::Target; 2], 1).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn full_queue_evicts_exactly_one_batch() {
        let mut q = MemoryQueue::with_capacity(6);
        for b in 0..3 {
            q.enqueue_batch(&rows(&[b, b]), 2, &[b, b], &[Domain::Source; 2], 1).unwrap();
        }
        assert_eq!(q.len(), 6);
        q.enqueue_batch(&rows(&[9, 9]), 2, &[9, 9], &[Domain::Source; 2], 1).unwrap();
        let labels: Vec<usize> = q.entries().map(|e| e.label).collect();
        assert_eq!(labels, vec![1, 1, 2, 2, 9, 9]);
    }

    #[test]
    fn negatives_examples() {
        let q = MemoryQueue::with_capacity(4);
        assert!(q.negatives_for(0, Domain::Source, 1).is_empty());
        let mut q = MemoryQueue::with_capacity(4);
        q.enqueue_batch(&rows(&[0, 0]), 2, &[3, 3], &[Domain::Source; 2], 1).unwrap();
        assert!(q.negatives_for(3, Domain::Source, 1).is_empty());
        assert_eq!(q.negatives_for(3, Domain::Target, 1), vec![0, 1]);
    }

    #[test]
    fn stale_target_labels_are_skipped() {
        let mut q = MemoryQueue::with_capacity(8);
        q.enqueue_batch(&rows(&[0, 1]), 2, &[0, 1], &[Domain::Target; 2], 1).unwrap();
        q.enqueue_batch(&rows(&[2, 3]), 2, &[0, 1], &[Domain::Target; 2], 2).unwrap();
        assert_eq!(q.negatives_for(0, Domain::Target, 2), vec![3]);
        assert_eq!(q.negatives_for(0, Domain::Source, 2), vec![0, 1, 2, 3]);
    }

    fn domain() -> impl Strategy<Value = Domain> {
        prop_oneof![Just(Domain::Source), Just(Domain::Target)]
    }

    proptest! {
        #[test]
        fn fifo_holds_last_capacity_items(capacity in 0usize..12, batches in proptest::collection::vec(1usize..6, 0..10)) {
            let mut q = MemoryQueue::with_capacity(capacity);
            let mut all = Vec::new();
            let mut next = 0;
            for b in batches {
                let ids: Vec<usize> = (next..next + b).collect();
                next += b;
                q.enqueue_batch(&rows(&ids), 2, &ids, &vec![Domain::Source; b], 0).unwrap();
                all.extend(ids);
                prop_assert!(q.len() <= capacity);
            }
            let keep = all.len().min(capacity);
            let expected = &all[all.len() - keep..];
            let got: Vec<usize> = q.entries().map(|e| e.label).collect();
            prop_assert_eq!(&got[..], expected);
        }

        #[test]
        fn negatives_match_brute_force(
            items in proptest::collection::vec((0usize..4, domain(), 0usize..3), 0..20),
            label in 0usize..4,
            anchor in domain(),
            epoch in 0usize..3,
        ) {
            let mut q = MemoryQueue::with_capacity(32);
            for (l, d, e) in &items {
                q.enqueue_batch(&[0.0], 1, &[*l], &[*d], *e).unwrap();
            }
            let mut expected = Vec::new();
            for (i, (l, d, e)) in items.iter().enumerate() {
                let ok = if *d != anchor { true } else if anchor == Domain::Target && *e != epoch { false } else { *l != label };
                if ok { expected.push(i); }
            }
            prop_assert_eq!(q.negatives_for(label, anchor, epoch), expected);
        }
    }
}
