//! Recall@K for detected scene graphs, with and without the one-predicate
//! per pair constraint.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::model::{FrameIndex, SceneGraph, Triplet};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no frame has ground-truth triplets")]
    NoGtFrames,
    #[error("{what} triplet in {video_id} frame {frame} has no boxes")]
    MissingBoxes {
        what: &'static str,
        video_id: String,
        frame: FrameIndex,
    },
    #[error("prediction in {video_id} frame {frame} has no finite score")]
    MissingScore { video_id: String, frame: FrameIndex },
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    WithConstraint,
    NoConstraint,
}

impl Constraint {
    pub fn label(self) -> &'static str {
        match self {
            Self::WithConstraint => "With Constraint",
            Self::NoConstraint => "No Constraint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    WithConstraint,
    NoConstraint,
    #[default]
    Both,
}

impl Regime {
    pub fn constraints(self) -> Vec<Constraint> {
        match self {
            Self::WithConstraint => vec![Constraint::WithConstraint],
            Self::NoConstraint => vec![Constraint::NoConstraint],
            Self::Both => vec![Constraint::WithConstraint, Constraint::NoConstraint],
        }
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "with" | "with_constraint" => Ok(Self::WithConstraint),
            "no" | "no_constraint" => Ok(Self::NoConstraint),
            "both" => Ok(Self::Both),
            _ => Err(format!(
                "unknown regime {s:?}; expected with_constraint, no_constraint or both"
            )),
        }
    }
}

/// How top-K predictions are credited against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// A ground-truth triplet is recalled when any top-K prediction matches it.
    #[default]
    AnyHit,
    /// Predictions in rank order each claim the first unclaimed matching
    /// ground-truth triplet.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    pub iou_threshold: f64,
    pub regime: Regime,
    pub match_policy: MatchPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_values: vec![20, 50],
            iou_threshold: 0.5,
            regime: Regime::Both,
            match_policy: MatchPolicy::AnyHit,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(EvalError::InvalidConfig(
                "k values must be positive and non-empty".into(),
            ));
        }
        if !self.k_values.windows(2).all(|w| w[0] < w[1]) {
            return Err(EvalError::InvalidConfig("k values must be strictly increasing".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "iou threshold {} must lie in (0, 1)",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Ground truth and predictions for one frame of one video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalInstance {
    pub video_id: String,
    pub frame_index: FrameIndex,
    pub gt: Vec<Triplet>,
    pub predictions: Vec<Triplet>,
}

/// Same classes and both boxes overlapping strictly above the threshold.
/// Unlocalized triplets never match.
pub fn match_triplet(pred: &Triplet, gt: &Triplet, iou_threshold: f64) -> bool {
    let (Some(ps), Some(po), Some(gs), Some(go)) = (pred.subject_box, pred.object_box, gt.subject_box, gt.object_box)
    else {
        return false;
    };
    pred.class_key() == gt.class_key() && ps.iou(&gs) > iou_threshold && po.iou(&go) > iou_threshold
}

type PairKey<'a> = ([u64; 4], &'a str, [u64; 4], &'a str);

fn pair_key(t: &Triplet) -> PairKey<'_> {
    let bits = |b: Option<crate::model::BoundingBox>| b.map(|b| b.bits()).unwrap_or([u64::MAX; 4]);
    (
        bits(t.subject_box),
        &t.subject_class,
        bits(t.object_box),
        &t.object_class,
    )
}

/// With the constraint, only the best-scored predicate survives for each
/// (subject box, subject class, object box, object class); ties keep the
/// earlier prediction. Survivors keep their input order.
pub fn apply_constraint(predictions: &[Triplet], constraint: Constraint) -> Vec<Triplet> {
    if constraint == Constraint::NoConstraint {
        return predictions.to_vec();
    }
    let mut best: HashMap<PairKey<'_>, usize> = HashMap::new();
    for (i, p) in predictions.iter().enumerate() {
        let score = p.score.unwrap_or(f64::NEG_INFINITY);
        best.entry(pair_key(p))
            .and_modify(|j| {
                if score > predictions[*j].score.unwrap_or(f64::NEG_INFINITY) {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| predictions[i].clone()).collect()
}

/// Predictions by descending score; equal scores keep input order.
pub fn rank_predictions(predictions: &[Triplet]) -> Vec<&Triplet> {
    let mut ranked: Vec<&Triplet> = predictions.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.score.unwrap_or(f64::NEG_INFINITY))
    });
    ranked
}

/// Number of ground-truth triplets recalled by `top`.
pub fn count_hits(top: &[&Triplet], gt: &[Triplet], iou_threshold: f64, policy: MatchPolicy) -> usize {
    match policy {
        MatchPolicy::AnyHit => gt
            .iter()
            .filter(|g| top.iter().any(|p| match_triplet(p, g, iou_threshold)))
            .count(),
        MatchPolicy::Greedy => {
            let mut claimed = vec![false; gt.len()];
            for p in top {
                if let Some(j) = (0..gt.len()).find(|&j| !claimed[j] && match_triplet(p, &gt[j], iou_threshold)) {
                    claimed[j] = true;
                }
            }
            claimed.into_iter().filter(|&c| c).count()
        }
    }
}

fn check(instance: &EvalInstance) -> Result<(), EvalError> {
    for g in &instance.gt {
        if !g.is_localized() {
            return Err(EvalError::MissingBoxes {
                what: "ground-truth",
                video_id: instance.video_id.clone(),
                frame: instance.frame_index,
            });
        }
    }
    for p in &instance.predictions {
        if !p.is_localized() {
            return Err(EvalError::MissingBoxes {
                what: "predicted",
                video_id: instance.video_id.clone(),
                frame: instance.frame_index,
            });
        }
        if !p.score.is_some_and(f64::is_finite) {
            return Err(EvalError::MissingScore {
                video_id: instance.video_id.clone(),
                frame: instance.frame_index,
            });
        }
    }
    Ok(())
}

/// Per-frame recall for every (constraint, K) requested.
fn frame_recalls(instance: &EvalInstance, config: &EvalConfig) -> Vec<((Constraint, usize), f64)> {
    let mut out = Vec::new();
    for c in config.regime.constraints() {
        let kept = apply_constraint(&instance.predictions, c);
        let ranked = rank_predictions(&kept);
        for &k in &config.k_values {
            let top = &ranked[..k.min(ranked.len())];
            let hits = count_hits(top, &instance.gt, config.iou_threshold, config.match_policy);
            out.push(((c, k), hits as f64 / instance.gt.len() as f64));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub constraint: Constraint,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Frames with at least one ground-truth triplet.
    pub frames_evaluated: usize,
    pub iou_threshold: f64,
    pub entries: Vec<RecallEntry>,
}

impl RecallReport {
    pub fn get(&self, constraint: Constraint, k: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.constraint == constraint && e.k == k)
            .map(|e| e.recall)
    }

    /// Table with one column per (constraint, K), values in percent.
    pub fn to_table(&self) -> String {
        let mut constraints: Vec<Constraint> = self.entries.iter().map(|e| e.constraint).collect();
        constraints.dedup();
        let (mut head, mut sub, mut row) = (String::new(), String::new(), String::new());
        for c in constraints {
            let cols: Vec<&RecallEntry> = self.entries.iter().filter(|e| e.constraint == c).collect();
            let names: Vec<String> = cols.iter().map(|e| format!("{:>6}", format!("R@{}", e.k))).collect();
            let values: Vec<String> = cols.iter().map(|e| format!("{:>6.2}", e.recall * 100.0)).collect();
            let (names, values) = (names.join(" | "), values.join(" | "));
            let width = names.len().max(c.label().len());
            let _ = write!(head, "| {:^width$} ", c.label());
            let _ = write!(sub, "| {names:>width$} ");
            let _ = write!(row, "| {values:>width$} ");
        }
        format!("{head}|\n{sub}|\n{row}|\n")
    }
}

impl fmt::Display for RecallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Mean per-frame recall over frames that have ground truth.
pub fn recall_at_k_with(
    instances: &[EvalInstance],
    config: &EvalConfig,
    exec: Execution,
) -> Result<RecallReport, EvalError> {
    config.validate()?;
    for i in instances {
        check(i)?;
    }
    let counted: Vec<&EvalInstance> = instances.iter().filter(|i| !i.gt.is_empty()).collect();
    if counted.is_empty() {
        return Err(EvalError::NoGtFrames);
    }
    let per_frame = exec.map(&counted, |i| frame_recalls(i, config));
    // Summed in input order so the result does not depend on scheduling.
    let mut sums: BTreeMap<(Constraint, usize), f64> = BTreeMap::new();
    for frame in &per_frame {
        for (key, r) in frame {
            *sums.entry(*key).or_default() += r;
        }
    }
    let n = counted.len() as f64;
    let mut entries = Vec::new();
    for c in config.regime.constraints() {
        for &k in &config.k_values {
            entries.push(RecallEntry {
                constraint: c,
                k,
                recall: sums[&(c, k)] / n,
            });
        }
    }
    Ok(RecallReport {
        frames_evaluated: counted.len(),
        iou_threshold: config.iou_threshold,
        entries,
    })
}

pub fn recall_at_k(instances: &[EvalInstance], config: &EvalConfig) -> Result<RecallReport, EvalError> {
    recall_at_k_with(instances, config, Execution::default())
}

/// One instance per (video, frame) that has ground truth or predictions,
/// ordered by video id then frame.
pub fn instances_from_graphs(gt: &[SceneGraph], predictions: &[SceneGraph]) -> Vec<EvalInstance> {
    let mut map: BTreeMap<(String, FrameIndex), EvalInstance> = BTreeMap::new();
    fn entry<'m>(
        map: &'m mut BTreeMap<(String, FrameIndex), EvalInstance>,
        vid: &str,
        frame: FrameIndex,
    ) -> &'m mut EvalInstance {
        map.entry((vid.to_string(), frame)).or_insert_with(|| EvalInstance {
            video_id: vid.to_string(),
            frame_index: frame,
            ..EvalInstance::default()
        })
    }
    for g in gt {
        for (frame, ts) in &g.per_frame {
            entry(&mut map, &g.video_id, *frame).gt.extend(ts.iter().cloned());
        }
    }
    for p in predictions {
        for (frame, ts) in &p.per_frame {
            entry(&mut map, &p.video_id, *frame)
                .predictions
                .extend(ts.iter().cloned());
        }
    }
    map.into_values().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub labels: usize,
    pub correct_labels: usize,
    pub gt: usize,
    pub recalled_gt: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Per-predicate precision and recall of unscored pseudo-labels against
/// ground truth on the same frames. A diagnostic, separate from Recall@K.
pub fn pseudo_label_quality(
    gt: &[SceneGraph],
    labels: &[SceneGraph],
    iou_threshold: f64,
) -> BTreeMap<String, ClassQuality> {
    let mut out: BTreeMap<String, ClassQuality> = BTreeMap::new();
    for inst in instances_from_graphs(gt, labels) {
        for p in &inst.predictions {
            let q = out.entry(p.predicate_class.clone()).or_default();
            q.labels += 1;
            if inst.gt.iter().any(|g| match_triplet(p, g, iou_threshold)) {
                q.correct_labels += 1;
            }
        }
        for g in &inst.gt {
            let q = out.entry(g.predicate_class.clone()).or_default();
            q.gt += 1;
            if inst.predictions.iter().any(|p| match_triplet(p, g, iou_threshold)) {
                q.recalled_gt += 1;
            }
        }
    }
    for q in out.values_mut() {
        q.precision = (q.labels > 0).then(|| q.correct_labels as f64 / q.labels as f64);
        q.recall = (q.gt > 0).then(|| q.recalled_gt as f64 / q.gt as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Provenance};
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn t(p: &str, s: BoundingBox, o: BoundingBox, score: Option<f64>, prov: Provenance) -> Triplet {
        let t = Triplet::unlocalized("person", p, "cup", prov).localized(1, s, o);
        match score {
            Some(v) => t.with_score(v),
            None => t,
        }
    }

    fn gt(p: &str, s: BoundingBox, o: BoundingBox) -> Triplet {
        t(p, s, o, None, Provenance::GroundTruth)
    }

    fn pred(p: &str, s: BoundingBox, o: BoundingBox, score: f64) -> Triplet {
        t(p, s, o, Some(score), Provenance::Prediction)
    }

    #[test]
    fn matching_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert!(match_triplet(&pred("holding", a, a, 1.0), &gt("holding", a, a), 0.5));
        let shifted = bx(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&shifted) - 2.0 / 6.0).abs() < 1e-12);
        assert!(!match_triplet(
            &pred("holding", shifted, a, 1.0),
            &gt("holding", a, a),
            0.5
        ));
        // IoU 0.49 on the subject.
        let s = bx(0.0, 0.0, 1.0, 1.0);
        let s2 = bx(0.0, 0.0, 0.49, 1.0);
        assert!((s.iou(&s2) - 0.49).abs() < 1e-12);
        assert!(!match_triplet(&pred("holding", s2, a, 1.0), &gt("holding", s, a), 0.5));
        // Exactly at the threshold is not enough.
        let half = bx(0.0, 0.0, 0.5, 1.0);
        assert!(!match_triplet(
            &pred("holding", half, a, 1.0),
            &gt("holding", s, a),
            0.5
        ));
    }

    #[test]
    fn constraint_keeps_argmax_predicate() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        let preds = vec![pred("holding", a, b, 0.4), pred("looking at", a, b, 0.9)];
        let w = apply_constraint(&preds, Constraint::WithConstraint);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].predicate_class, "looking at");
        assert_eq!(apply_constraint(&preds, Constraint::NoConstraint), preds);
        assert!(apply_constraint(&[], Constraint::WithConstraint).is_empty());
    }

    fn one_frame(gts: Vec<Triplet>, preds: Vec<Triplet>) -> Vec<EvalInstance> {
        vec![EvalInstance {
            video_id: "v".into(),
            frame_index: 1,
            gt: gts,
            predictions: preds,
        }]
    }

    #[test]
    fn simple_recalls() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(5.0, 5.0, 7.0, 7.0);
        let cfg = EvalConfig::default();
        let both = recall_at_k(
            &one_frame(
                vec![gt("holding", a, b), gt("touching", a, b)],
                vec![pred("holding", a, b, 0.9), pred("touching", a, b, 0.8)],
            ),
            &cfg,
        )
        .unwrap();
        assert_eq!(both.get(Constraint::NoConstraint, 20), Some(1.0));
        // With the constraint only the 0.9 predicate survives for the pair.
        assert_eq!(both.get(Constraint::WithConstraint, 20), Some(0.5));
        let half = recall_at_k(
            &one_frame(
                vec![gt("holding", a, b), gt("touching", a, b)],
                vec![pred("holding", a, b, 0.9)],
            ),
            &cfg,
        )
        .unwrap();
        assert_eq!(half.get(Constraint::WithConstraint, 20), Some(0.5));
    }

    #[test]
    fn no_gt_frames_is_an_error() {
        assert_eq!(recall_at_k(&[], &EvalConfig::default()), Err(EvalError::NoGtFrames));
    }

    #[test]
    fn unscored_prediction_is_rejected() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let inst = one_frame(
            vec![gt("holding", a, a)],
            vec![t("holding", a, a, None, Provenance::Prediction)],
        );
        assert!(matches!(
            recall_at_k(&inst, &EvalConfig::default()),
            Err(EvalError::MissingScore { .. })
        ));
    }

    #[test]
    fn greedy_policy_consumes_once() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let cfg = EvalConfig {
            match_policy: MatchPolicy::Greedy,
            ..EvalConfig::default()
        };
        // Two identical GT, one prediction: any-hit recalls both, greedy one.
        let inst = one_frame(
            vec![gt("holding", a, a), gt("holding", a, a)],
            vec![pred("holding", a, a, 0.5)],
        );
        assert_eq!(
            recall_at_k(&inst, &cfg).unwrap().get(Constraint::NoConstraint, 20),
            Some(0.5)
        );
        assert_eq!(
            recall_at_k(&inst, &EvalConfig::default())
                .unwrap()
                .get(Constraint::NoConstraint, 20),
            Some(1.0)
        );
    }

    #[test]
    fn table_layout() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let r = recall_at_k(
            &one_frame(vec![gt("holding", a, a)], vec![pred("holding", a, a, 0.5)]),
            &EvalConfig::default(),
        )
        .unwrap();
        let table = r.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("With Constraint") && lines[0].contains("No Constraint"));
        assert!(lines[2].contains("100.00"));
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }

    #[test]
    fn config_validation() {
        let mut c = EvalConfig::default();
        assert!(c.validate().is_ok());
        c.k_values = vec![50, 20];
        assert!(c.validate().is_err());
        c.k_values = vec![20];
        c.iou_threshold = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pseudo_quality_counts() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let mut g = SceneGraph::new("v");
        g.insert(gt("holding", a, a));
        let mut l = SceneGraph::new("v");
        l.insert(t("holding", a, a, None, Provenance::Caption));
        l.insert(t("touching", a, a, None, Provenance::Caption));
        let q = pseudo_label_quality(&[g], &[l], 0.5);
        assert_eq!(q["holding"].precision, Some(1.0));
        assert_eq!(q["holding"].recall, Some(1.0));
        assert_eq!(q["touching"].precision, Some(0.0));
        assert_eq!(q["touching"].recall, None);
    }

    const PREDS: [&str; 3] = ["holding", "touching", "looking at"];

    fn arb_triplet() -> impl Strategy<Value = (usize, usize, usize, u8)> {
        // Boxes drawn from a small grid so matches are common.
        (0usize..3, 0usize..3, 0usize..3, 0u8..8)
    }

    fn grid_box(i: usize) -> BoundingBox {
        let x = i as f64 * 0.6;
        bx(x, 0.0, x + 1.0, 1.0)
    }

    fn build(rows: &[(usize, usize, usize, u8)], scored: bool) -> Vec<Triplet> {
        rows.iter()
            .map(|&(p, s, o, score)| {
                if scored {
                    pred(PREDS[p], grid_box(s), grid_box(o), score as f64 / 8.0)
                } else {
                    gt(PREDS[p], grid_box(s), grid_box(o))
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_scale_invariant(
            gts in prop::collection::vec(arb_triplet(), 1..4),
            preds in prop::collection::vec(arb_triplet(), 0..8),
            scale in prop::sample::select(vec![0.5f64, 2.0, 10.0]),
        ) {
            let cfg = EvalConfig { k_values: vec![1, 2, 4, 8], ..EvalConfig::default() };
            let inst = one_frame(build(&gts, false), build(&preds, true));
            let r = recall_at_k(&inst, &cfg).unwrap();
            for c in [Constraint::WithConstraint, Constraint::NoConstraint] {
                let vals: Vec<f64> = cfg.k_values.iter().map(|&k| r.get(c, k).unwrap()).collect();
                prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            }
            let mut scaled = inst.clone();
            for p in &mut scaled[0].predictions {
                p.score = p.score.map(|s| s * scale);
            }
            prop_assert_eq!(recall_at_k(&scaled, &cfg).unwrap(), r);
        }

        #[test]
        fn no_constraint_is_superset(preds in prop::collection::vec(arb_triplet(), 0..10)) {
            let p = build(&preds, true);
            let with = apply_constraint(&p, Constraint::WithConstraint);
            let without = apply_constraint(&p, Constraint::NoConstraint);
            prop_assert!(with.iter().all(|w| without.contains(w)));
        }
    }
}
