//! Negative pseudo-labels from box motion on frames no sentence covers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::model::{
    BoundingBox, Detection, FrameIndex, FrameInterval, Provenance, SceneGraph, SegmentedSentence, Triplet,
};
use crate::sgparse::ground_pair;

/// Subject class every candidate is built around.
pub const SUBJECT_CLASS: &str = "person";

#[derive(Debug, Error)]
pub enum PlmError {
    #[error("invalid pseudo-labeling config: {0}")]
    InvalidConfig(String),
}

/// Generalized IoU: IoU minus the share of the enclosing box covered by
/// neither box. Lies in (-1, 1].
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let hull = a.hull(b).area();
    let union = a.union_area(b);
    a.iou(b) - (hull - union) / hull
}

/// Which endpoints of an unaligned run receive a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStrategy {
    Start,
    End,
    StartAndEnd,
}

impl FrameStrategy {
    /// Distinct frames of `run` named by the strategy, ascending.
    pub fn frames(self, run: FrameInterval) -> Vec<FrameIndex> {
        match self {
            Self::Start => vec![run.lo()],
            Self::End => vec![run.hi()],
            Self::StartAndEnd if run.lo() == run.hi() => vec![run.lo()],
            Self::StartAndEnd => vec![run.lo(), run.hi()],
        }
    }
}

impl FromStr for FrameStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "start" => Ok(Self::Start),
            "end" => Ok(Self::End),
            "start_and_end" => Ok(Self::StartAndEnd),
            _ => Err(format!(
                "unknown frame strategy {s:?}; expected start, end or start_and_end"
            )),
        }
    }
}

impl fmt::Display for FrameStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Start => "start",
            Self::End => "end",
            Self::StartAndEnd => "start_and_end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlmConfig {
    /// Percentage of the global candidate pool that receives labels.
    pub alpha_percent: f64,
    pub strategy_not_looking: FrameStrategy,
    pub strategy_not_contacting: FrameStrategy,
    /// Class names for (not looking at, not contacting).
    pub negative_class_names: (String, String),
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self {
            alpha_percent: 15.0,
            strategy_not_looking: FrameStrategy::StartAndEnd,
            strategy_not_contacting: FrameStrategy::End,
            negative_class_names: ("not looking at".into(), "not contacting".into()),
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<(), PlmError> {
        if !(self.alpha_percent > 0.0 && self.alpha_percent <= 100.0) {
            return Err(PlmError::InvalidConfig(format!(
                "alpha_percent {} must lie in (0, 100]",
                self.alpha_percent
            )));
        }
        let (a, b) = &self.negative_class_names;
        if a.trim().is_empty() || b.trim().is_empty() {
            return Err(PlmError::InvalidConfig("negative class names must be non-empty".into()));
        }
        Ok(())
    }

    /// Pool members to select: `ceil(alpha / 100 * pool)`, at least one for a
    /// non-empty pool.
    pub fn selection_count(&self, pool: usize) -> usize {
        if pool == 0 {
            return 0;
        }
        // The epsilon absorbs rounding in products that are whole numbers.
        let exact = self.alpha_percent * pool as f64 / 100.0;
        ((exact - 1e-9).ceil() as usize).clamp(1, pool)
    }
}

/// Maximal runs of frames in `1..=frame_count` outside every aligned interval.
pub fn collect_unaligned_runs(frame_count: u32, sentences: &[SegmentedSentence]) -> Vec<FrameInterval> {
    let mut covered = vec![false; frame_count as usize + 1];
    for iv in sentences.iter().filter_map(|s| s.aligned_frames) {
        for f in iv.frames().filter(|&f| f <= frame_count) {
            covered[f as usize] = true;
        }
    }
    let mut runs = Vec::new();
    let mut start = None;
    for f in 1..=frame_count {
        match (covered[f as usize], start) {
            (false, None) => start = Some(f),
            (true, Some(s)) => {
                runs.push(FrameInterval::new(s, f - 1).expect("ordered"));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(FrameInterval::new(s, frame_count).expect("ordered"));
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionCandidate {
    pub video_id: String,
    pub subject_class: String,
    pub object_class: String,
    pub run: FrameInterval,
    pub g_start: f64,
    pub g_end: f64,
    /// `g_end - g_start`; negative when the pair moves apart.
    pub motion_score: f64,
    pub boxes_start: (BoundingBox, BoundingBox),
    pub boxes_end: (BoundingBox, BoundingBox),
}

impl MotionCandidate {
    fn boxes_at(&self, frame: FrameIndex) -> (BoundingBox, BoundingBox) {
        if frame == self.run.lo() {
            self.boxes_start
        } else {
            self.boxes_end
        }
    }
}

/// Candidates for one video: every unaligned run paired with every object
/// class of the video's pseudo scene graph, kept when both endpoints of the
/// run ground a person and the object.
pub fn build_candidates(
    video_id: &str,
    detections: &[Detection],
    graph: &SceneGraph,
    runs: &[FrameInterval],
) -> Vec<MotionCandidate> {
    let objects = graph.object_classes();
    let mut out = Vec::new();
    for &run in runs {
        for &object in &objects {
            let Some(start) = ground_pair(detections, run.lo(), SUBJECT_CLASS, object) else {
                continue;
            };
            let Some(end) = ground_pair(detections, run.hi(), SUBJECT_CLASS, object) else {
                continue;
            };
            let g_start = giou(&start.0, &start.1);
            let g_end = giou(&end.0, &end.1);
            out.push(MotionCandidate {
                video_id: video_id.to_string(),
                subject_class: SUBJECT_CLASS.to_string(),
                object_class: object.to_string(),
                run,
                g_start,
                g_end,
                motion_score: g_end - g_start,
                boxes_start: start,
                boxes_end: end,
            });
        }
    }
    out
}

/// Candidates for every video that has a pseudo scene graph. Output is
/// ordered by video id, then run, then object class.
pub fn build_all_candidates(
    detections: &BTreeMap<String, Vec<Detection>>,
    graphs: &BTreeMap<String, SceneGraph>,
    runs: &BTreeMap<String, Vec<FrameInterval>>,
    exec: Execution,
) -> Vec<MotionCandidate> {
    let videos: Vec<(&String, &SceneGraph)> = graphs.iter().collect();
    exec.map(&videos, |(vid, graph)| {
        let dets = detections.get(*vid).map(Vec::as_slice).unwrap_or(&[]);
        let r = runs.get(*vid).map(Vec::as_slice).unwrap_or(&[]);
        build_candidates(vid, dets, graph, r)
    })
    .into_iter()
    .flatten()
    .collect()
}

fn pool_order(a: &MotionCandidate, b: &MotionCandidate) -> std::cmp::Ordering {
    a.motion_score
        .total_cmp(&b.motion_score)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.run.lo().cmp(&b.run.lo()))
        .then_with(|| a.subject_class.cmp(&b.subject_class))
        .then_with(|| a.object_class.cmp(&b.object_class))
}

/// The selected share of the pool, most negative motion first.
pub fn select_candidates<'c>(candidates: &'c [MotionCandidate], config: &PlmConfig) -> Vec<&'c MotionCandidate> {
    let mut pool: Vec<&MotionCandidate> = candidates.iter().collect();
    pool.sort_by(|a, b| pool_order(a, b));
    pool.truncate(config.selection_count(candidates.len()));
    pool
}

/// Negative triplets for the selected share of a dataset-wide pool, as
/// `(video_id, triplet)` pairs in selection order.
pub fn assign_negatives(
    candidates: &[MotionCandidate],
    config: &PlmConfig,
) -> Result<Vec<(String, Triplet)>, PlmError> {
    config.validate()?;
    if candidates.is_empty() {
        log::warn!("no motion candidates; no negative pseudo-labels assigned");
        return Ok(Vec::new());
    }
    let (not_looking, not_contacting) = &config.negative_class_names;
    let mut out = Vec::new();
    for c in select_candidates(candidates, config) {
        let plan = [
            (not_looking, config.strategy_not_looking),
            (not_contacting, config.strategy_not_contacting),
        ];
        for (predicate, strategy) in plan {
            for frame in strategy.frames(c.run) {
                let (s, o) = c.boxes_at(frame);
                let t = Triplet::unlocalized(&c.subject_class, predicate, &c.object_class, Provenance::NegativePseudo)
                    .localized(frame, s, o);
                out.push((c.video_id.clone(), t));
            }
        }
    }
    Ok(out)
}

/// Frames of `video_id` that carry at least one label.
pub fn labeled_frames(labels: &[(String, Triplet)], video_id: &str) -> BTreeSet<FrameIndex> {
    labels
        .iter()
        .filter(|(v, _)| v == video_id)
        .filter_map(|(_, t)| t.frame_index)
        .collect()
}
