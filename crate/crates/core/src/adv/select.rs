use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// How many of the best-scoring clusters a sentence takes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Everything before the largest consecutive drop.
    #[default]
    SteepestDecline,
    /// Everything before the first drop larger than `tau`, or all clusters.
    FixedGap(f64),
}

impl SelectionMode {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Self::FixedGap(tau) if !(tau > 0.0 && tau < 1.0) => Err(format!("gap threshold {tau} must lie in (0, 1)")),
            _ => Ok(()),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = String;

    /// `steepest` or `gap:<tau>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mode = match s {
            "steepest" | "steepest_decline" => Self::SteepestDecline,
            _ => {
                let tau = s
                    .strip_prefix("gap:")
                    .ok_or_else(|| format!("unknown selection {s:?}; use steepest or gap:<tau>"))?;
                Self::FixedGap(tau.parse().map_err(|e| format!("bad gap threshold {tau:?}: {e}"))?)
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SteepestDecline => write!(f, "steepest"),
            Self::FixedGap(tau) => write!(f, "gap:{tau}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Cluster ids by descending similarity; ties keep the lower id first.
    pub order: Vec<usize>,
    /// Length of the selected prefix of `order`.
    pub selected: usize,
    /// Size of the drop right after the selected prefix, if there is one.
    pub gap: Option<f64>,
}

impl Selection {
    pub fn clusters(&self) -> &[usize] {
        &self.order[..self.selected]
    }
}

/// Sorts clusters by similarity and picks a prefix of that order.
pub fn rank_and_select(similarities: &[f64], mode: SelectionMode) -> Selection {
    assert!(!similarities.is_empty(), "need at least one cluster");
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    let drops: Vec<f64> = order
        .windows(2)
        .map(|w| similarities[w[0]] - similarities[w[1]])
        .collect();
    let boundary = match mode {
        SelectionMode::SteepestDecline => drops
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (i, &d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i),
        SelectionMode::FixedGap(tau) => drops.iter().position(|&d| d > tau),
    };
    match boundary {
        Some(i) => Selection {
            order,
            selected: i + 1,
            gap: Some(drops[i]),
        },
        None => {
            let selected = order.len();
            Selection {
                order,
                selected,
                gap: None,
            }
        }
    }
}

/// Selected cluster ids, highest similarity first.
pub fn select_clusters(similarities: &[f64], mode: SelectionMode) -> Vec<usize> {
    rank_and_select(similarities, mode).clusters().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Scans every boundary and keeps the earliest strictly largest drop.
    fn oracle_steepest(scores: &[f64]) -> usize {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted.len() == 1 {
            return 1;
        }
        let mut best_len = 1;
        let mut best_drop = f64::NEG_INFINITY;
        for len in 1..sorted.len() {
            let drop = sorted[len - 1] - sorted[len];
            if drop > best_drop {
                best_drop = drop;
                best_len = len;
            }
        }
        best_len
    }

    #[test]
    fn four_cluster_ordering() {
        // c1..c4 at ids 0..3; order c4 > c3 > c1 > c2 with the big drop at c1 -> c2.
        let sims = [0.70, 0.20, 0.78, 0.83];
        assert_eq!(select_clusters(&sims, SelectionMode::SteepestDecline), vec![3, 2, 0]);
    }

    #[test]
    fn single_cluster() {
        assert_eq!(select_clusters(&[-0.3], SelectionMode::SteepestDecline), vec![0]);
        assert_eq!(select_clusters(&[0.9], SelectionMode::FixedGap(0.2)), vec![0]);
    }

    #[test]
    fn five_scores() {
        let s = [0.91, 0.88, 0.84, 0.40, 0.35];
        assert_eq!(oracle_steepest(&s), 3);
        let sel = rank_and_select(&s, SelectionMode::SteepestDecline);
        assert_eq!(sel.clusters(), &[0, 1, 2]);
        assert!((sel.gap.unwrap() - 0.44).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_earliest_boundary() {
        let s = [1.0, 0.5, 0.0];
        assert_eq!(select_clusters(&s, SelectionMode::SteepestDecline), vec![0]);
    }

    #[test]
    fn fixed_gap() {
        let s = [0.9, 0.85, 0.6, 0.1];
        assert_eq!(select_clusters(&s, SelectionMode::FixedGap(0.2)), vec![0, 1]);
        assert_eq!(select_clusters(&s, SelectionMode::FixedGap(0.6)), vec![0, 1, 2, 3]);
    }

    #[test]
    fn parse_modes() {
        assert_eq!(
            "steepest".parse::<SelectionMode>().unwrap(),
            SelectionMode::SteepestDecline
        );
        assert_eq!(
            "gap:0.2".parse::<SelectionMode>().unwrap(),
            SelectionMode::FixedGap(0.2)
        );
        assert!("gap:1.5".parse::<SelectionMode>().is_err());
        assert!("gap:x".parse::<SelectionMode>().is_err());
        assert!("other".parse::<SelectionMode>().is_err());
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // Multiples of 1/64 keep every drop exact, so shifts cannot perturb ties.
        prop::collection::vec((-64i32..=64).prop_map(|v| v as f64 / 64.0), 1..12)
    }

    proptest! {
        #[test]
        fn matches_exhaustive_scan(s in scores()) {
            let sel = rank_and_select(&s, SelectionMode::SteepestDecline);
            prop_assert_eq!(sel.selected, oracle_steepest(&s));
        }

        #[test]
        fn selection_is_prefix_of_descending_order(s in scores(), tau in 0.01f64..0.99) {
            for mode in [SelectionMode::SteepestDecline, SelectionMode::FixedGap(tau)] {
                let sel = rank_and_select(&s, mode);
                let chosen = sel.clusters();
                prop_assert!(!chosen.is_empty());
                let min_in = chosen.iter().map(|&c| s[c]).fold(f64::INFINITY, f64::min);
                for (i, v) in s.iter().enumerate() {
                    if !chosen.contains(&i) {
                        prop_assert!(*v <= min_in);
                    }
                }
            }
        }

        #[test]
        fn shift_invariant(s in scores(), shift in -8i32..8) {
            let shifted: Vec<f64> = s.iter().map(|v| v + shift as f64 / 4.0).collect();
            prop_assert_eq!(
                select_clusters(&s, SelectionMode::SteepestDecline),
                select_clusters(&shifted, SelectionMode::SteepestDecline)
            );
        }

        #[test]
        fn positive_scaling_keeps_argmax_drop(s in scores(), scale in prop::sample::select(vec![0.5f64, 2.0, 4.0, 8.0])) {
            let scaled: Vec<f64> = s.iter().map(|v| v * scale).collect();
            prop_assert_eq!(
                select_clusters(&s, SelectionMode::SteepestDecline),
                select_clusters(&scaled, SelectionMode::SteepestDecline)
            );
        }
    }
}
