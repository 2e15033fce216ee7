//! Removal of alignments that contradict sentence order.

use std::collections::BTreeSet;

use crate::model::FrameIndex;

/// Tracks what earlier sentences have claimed.
///
/// The watermark is the largest first-frame among sentences committed so
/// far; a later sentence may not take frames before it, nor frames an
/// earlier sentence already holds.
#[derive(Debug, Clone, Default)]
pub struct TemporalPruner {
    watermark: Option<FrameIndex>,
    committed: BTreeSet<FrameIndex>,
}

impl TemporalPruner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn watermark(&self) -> Option<FrameIndex> {
        self.watermark
    }

    /// Candidates that survive against everything committed so far.
    pub fn admit(&self, candidates: &BTreeSet<FrameIndex>) -> BTreeSet<FrameIndex> {
        let floor = self.watermark.unwrap_or(0);
        candidates
            .iter()
            .copied()
            .filter(|f| *f >= floor && !self.committed.contains(f))
            .collect()
    }

    pub fn commit(&mut self, frames: &BTreeSet<FrameIndex>) {
        if let Some(&first) = frames.first() {
            self.watermark = Some(self.watermark.map_or(first, |w| w.max(first)));
            self.committed.extend(frames);
        }
    }
}

/// Prunes per-sentence frame sets in sentence order.
///
/// Input pairs are `(order_index, frames)`; output is sorted by
/// `order_index`.
pub fn prune_temporal(assignments: &[(u32, BTreeSet<FrameIndex>)]) -> Vec<(u32, BTreeSet<FrameIndex>)> {
    let mut sorted: Vec<&(u32, BTreeSet<FrameIndex>)> = assignments.iter().collect();
    sorted.sort_by_key(|(m, _)| *m);
    let mut pruner = TemporalPruner::new();
    sorted
        .into_iter()
        .map(|(m, frames)| {
            let kept = pruner.admit(frames);
            pruner.commit(&kept);
            (*m, kept)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn earlier_frame_removed_from_later_sentence() {
        let out = prune_temporal(&[(1, set(&[2])), (2, set(&[1, 3, 4, 5, 6]))]);
        assert_eq!(out, vec![(1, set(&[2])), (2, set(&[3, 4, 5, 6]))]);
    }

    #[test]
    fn single_sentence_unchanged() {
        let out = prune_temporal(&[(1, set(&[4, 1, 9]))]);
        assert_eq!(out, vec![(1, set(&[1, 4, 9]))]);
    }

    #[test]
    fn wholly_earlier_sentence_emptied() {
        let out = prune_temporal(&[(1, set(&[3])), (2, set(&[1, 2]))]);
        assert_eq!(out[1].1, set(&[]));
        // Exhaustive pair scan: no later frame precedes an earlier one.
        for (i, (_, a)) in out.iter().enumerate() {
            for (_, b) in &out[i + 1..] {
                for f in b {
                    assert!(a.iter().all(|g| f >= g));
                }
            }
        }
    }

    #[test]
    fn committed_frames_are_exclusive() {
        let out = prune_temporal(&[(1, set(&[2, 3])), (2, set(&[3, 4]))]);
        assert_eq!(out[1].1, set(&[4]));
    }

    #[test]
    fn empty_sentence_does_not_move_watermark() {
        let out = prune_temporal(&[(1, set(&[])), (2, set(&[1, 2]))]);
        assert_eq!(out[1].1, set(&[1, 2]));
    }

    proptest! {
        #[test]
        fn outputs_respect_watermark(sets in prop::collection::vec(prop::collection::btree_set(1u32..20, 0..6), 1..6)) {
            let input: Vec<(u32, BTreeSet<u32>)> =
                sets.into_iter().enumerate().map(|(i, s)| (i as u32 + 1, s)).collect();
            let out = prune_temporal(&input);
            for (i, (_, kept)) in out.iter().enumerate() {
                prop_assert!(kept.is_subset(&input[i].1));
                for (_, earlier) in &out[..i] {
                    prop_assert!(kept.is_disjoint(earlier));
                    if let (Some(a), Some(b)) = (earlier.first(), kept.first()) {
                        prop_assert!(b >= a);
                    }
                }
            }
        }
    }
}
