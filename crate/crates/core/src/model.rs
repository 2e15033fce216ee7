//! Domain types shared by every stage of the pipeline.
//!
//! Frame indices are 1-based everywhere. Boxes are stored in corner form
//! `(x1, y1, x2, y2)` in pixels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 1-based frame index.
pub type FrameIndex = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid frame interval [{lo}, {hi}]")]
    InvalidInterval { lo: FrameIndex, hi: FrameIndex },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid embedding matrix: {0}")]
    InvalidEmbeddings(String),
}

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ModelError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 < 0.0 || y1 < 0.0 || x1 >= x2 || y1 >= y2 {
            return Err(ModelError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap, zero when the boxes only touch or are apart.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn union_area(&self, other: &Self) -> f64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    /// Smallest axis-aligned box enclosing both.
    pub fn hull(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        self.intersection_area(other) / self.union_area(other)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, ModelError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Bit-level key, usable for grouping identical boxes.
    pub(crate) fn bits(&self) -> [u64; 4] {
        [
            self.x1.to_bits(),
            self.y1.to_bits(),
            self.x2.to_bits(),
            self.y2.to_bits(),
        ]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = ModelError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Inclusive range of 1-based frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[FrameIndex; 2]", into = "[FrameIndex; 2]")]
pub struct FrameInterval {
    lo: FrameIndex,
    hi: FrameIndex,
}

impl FrameInterval {
    pub fn new(lo: FrameIndex, hi: FrameIndex) -> Result<Self, ModelError> {
        if lo == 0 || lo > hi {
            return Err(ModelError::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn single(frame: FrameIndex) -> Result<Self, ModelError> {
        Self::new(frame, frame)
    }

    pub fn lo(&self) -> FrameIndex {
        self.lo
    }

    pub fn hi(&self) -> FrameIndex {
        self.hi
    }

    pub fn len(&self) -> u32 {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: FrameIndex) -> bool {
        self.lo <= frame && frame <= self.hi
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameIndex> {
        self.lo..=self.hi
    }
}

impl TryFrom<[FrameIndex; 2]> for FrameInterval {
    type Error = ModelError;

    fn try_from(v: [FrameIndex; 2]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1])
    }
}

impl From<FrameInterval> for [FrameIndex; 2] {
    fn from(i: FrameInterval) -> Self {
        [i.lo, i.hi]
    }
}

impl fmt::Display for FrameInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// A video, its ordered frames and the caption paired with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub video_id: String,
    pub frame_ids: Vec<String>,
    /// Informational only.
    pub fps: f64,
    pub caption: String,
}

impl VideoManifest {
    /// Number of frames `T`.
    pub fn frame_count(&self) -> u32 {
        self.frame_ids.len() as u32
    }

    /// Violations of the manifest's own invariants.
    pub fn issues(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        if self.video_id.trim().is_empty() {
            issues.push(ValidationIssue::EmptyVideoId);
        }
        if self.frame_ids.is_empty() {
            issues.push(ValidationIssue::NoFrames);
        }
        let mut seen = BTreeSet::new();
        for id in &self.frame_ids {
            if !seen.insert(id.as_str()) {
                issues.push(ValidationIssue::DuplicateFrameId(id.clone()));
            }
        }
        if self.caption.trim().is_empty() {
            issues.push(ValidationIssue::EmptyCaption);
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            issues.push(ValidationIssue::InvalidFps(self.fps));
        }
        issues
    }
}

/// One object detection on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: FrameIndex,
    pub entity_class: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Attention,
    Spatial,
    Contacting,
}

/// Closed entity and action vocabularies of a target dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entity_classes: BTreeSet<String>,
    pub action_classes: BTreeSet<String>,
    pub action_partition: BTreeMap<String, ActionKind>,
    #[serde(default)]
    pub negative_classes: BTreeSet<String>,
}

const ACTION_GENOME_VOCAB: &str = include_str!("../assets/action_genome_vocab.json");

impl Vocabulary {
    /// The Action Genome vocabulary shipped with the crate: 36 entity
    /// classes and 25 actions (3 attention, 6 spatial, 16 contacting).
    pub fn action_genome() -> Self {
        let vocab: Self = serde_json::from_str(ACTION_GENOME_VOCAB).expect("bundled vocabulary parses");
        vocab.validate().expect("bundled vocabulary is valid");
        vocab
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(neg) = self.negative_classes.iter().find(|c| !self.action_classes.contains(*c)) {
            return Err(ModelError::InvalidVocabulary(format!(
                "negative class {neg:?} is not an action class"
            )));
        }
        for action in &self.action_classes {
            if !self.action_partition.contains_key(action) {
                return Err(ModelError::InvalidVocabulary(format!(
                    "action {action:?} has no partition"
                )));
            }
        }
        if let Some(extra) = self.action_partition.keys().find(|k| !self.action_classes.contains(*k)) {
            return Err(ModelError::InvalidVocabulary(format!(
                "partition names unknown action {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn partition_counts(&self) -> BTreeMap<ActionKind, usize> {
        let mut counts = BTreeMap::new();
        for kind in self.action_partition.values() {
            *counts.entry(*kind).or_insert(0) += 1;
        }
        counts
    }

    pub fn has_entity(&self, class: &str) -> bool {
        self.entity_classes.contains(class)
    }

    pub fn has_action(&self, class: &str) -> bool {
        self.action_classes.contains(class)
    }
}

/// One temporally ordered sentence of a segmented caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedSentence {
    /// 1-based position `m` in temporal order.
    pub order_index: u32,
    pub text: String,
    #[serde(default)]
    pub aligned_frames: Option<FrameInterval>,
}

impl SegmentedSentence {
    pub fn new(order_index: u32, text: impl Into<String>) -> Self {
        Self {
            order_index,
            text: text.into(),
            aligned_frames: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Caption,
    NegativePseudo,
    GroundTruth,
    Prediction,
}

/// A `<subject, predicate, object>` triplet, optionally localized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject_class: String,
    pub predicate_class: String,
    pub object_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<FrameIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub provenance: Provenance,
}

impl Triplet {
    pub fn unlocalized(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        Self {
            subject_class: subject.into(),
            predicate_class: predicate.into(),
            object_class: object.into(),
            subject_box: None,
            object_box: None,
            frame_index: None,
            score: None,
            provenance,
        }
    }

    pub fn localized(mut self, frame_index: FrameIndex, subject_box: BoundingBox, object_box: BoundingBox) -> Self {
        self.frame_index = Some(frame_index);
        self.subject_box = Some(subject_box);
        self.object_box = Some(object_box);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn is_localized(&self) -> bool {
        self.subject_box.is_some() && self.object_box.is_some()
    }

    /// Localized triplets must carry a frame index.
    pub fn is_consistent(&self) -> bool {
        !self.is_localized() || self.frame_index.is_some()
    }

    pub fn class_key(&self) -> (&str, &str, &str) {
        (&self.subject_class, &self.predicate_class, &self.object_class)
    }
}

/// Per-frame localized scene graphs of one video.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub video_id: String,
    pub per_frame: BTreeMap<FrameIndex, Vec<Triplet>>,
}

impl SceneGraph {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            per_frame: BTreeMap::new(),
        }
    }

    /// Inserts a localized triplet under its own frame index.
    ///
    /// Panics if the triplet has no frame index.
    pub fn insert(&mut self, triplet: Triplet) {
        let frame = triplet.frame_index.expect("scene graph triplets carry a frame index");
        self.per_frame.entry(frame).or_default().push(triplet);
    }

    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.per_frame.values().flatten()
    }

    pub fn triplet_count(&self) -> usize {
        self.per_frame.values().map(Vec::len).sum()
    }

    pub fn object_classes(&self) -> BTreeSet<&str> {
        self.triplets().map(|t| t.object_class.as_str()).collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.per_frame
            .iter()
            .all(|(frame, ts)| ts.iter().all(|t| t.frame_index == Some(*frame)))
    }
}

/// Row-major matrix of embeddings, one row per frame or sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    row_ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(row_ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidEmbeddings("dim must be positive".into()));
        }
        if data.len() != row_ids.len() * dim {
            return Err(ModelError::InvalidEmbeddings(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                row_ids.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidEmbeddings("non-finite value".into()));
        }
        Ok(Self { row_ids, dim, data })
    }

    pub fn from_rows(row_ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, ModelError> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(ModelError::InvalidEmbeddings(format!(
                "row {bad} has dim {} instead of {dim}",
                rows[bad].len()
            )));
        }
        Self::new(row_ids, dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalized(mut self) -> Result<Self, ModelError> {
        for (i, row) in self.data.chunks_exact_mut(self.dim).enumerate() {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(ModelError::InvalidEmbeddings(format!("row {i} is all zeros")));
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(self)
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.iter_rows().all(|row| {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            (norm - 1.0).abs() <= tol
        })
    }
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    EmptyVideoId,
    NoFrames,
    DuplicateFrameId(String),
    EmptyCaption,
    InvalidFps(f64),
    MissingEmbedding { frame: FrameIndex },
    ExtraEmbeddingRows { expected: u32, found: u32 },
    UnnormalizedEmbeddings,
    FrameOutOfRange { frame: FrameIndex, frame_count: u32 },
    DegenerateBox { frame: FrameIndex, entity_class: String },
    ConfidenceOutOfRange { frame: FrameIndex, confidence: f64 },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyVideoId => write!(f, "empty video id"),
            Self::NoFrames => write!(f, "manifest has no frames"),
            Self::DuplicateFrameId(id) => write!(f, "duplicate frame id {id}"),
            Self::EmptyCaption => write!(f, "caption is empty"),
            Self::InvalidFps(fps) => write!(f, "fps {fps} is not positive"),
            Self::MissingEmbedding { frame } => write!(f, "missing embedding for frame {frame}"),
            Self::ExtraEmbeddingRows { expected, found } => {
                write!(f, "{found} embedding rows for {expected} frames")
            }
            Self::UnnormalizedEmbeddings => write!(f, "embedding rows are not unit length"),
            Self::FrameOutOfRange { frame, frame_count } => {
                write!(f, "detection frame {frame} outside 1..={frame_count}")
            }
            Self::DegenerateBox { frame, entity_class } => {
                write!(f, "degenerate box for {entity_class} on frame {frame}")
            }
            Self::ConfidenceOutOfRange { frame, confidence } => {
                write!(f, "confidence {confidence} on frame {frame} outside [0, 1]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub video_id: String,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.issues.iter().map(ToString::to_string).collect()
    }
}

/// A detection whose box could not be constructed, as read from a raw file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub frame_index: FrameIndex,
    pub entity_class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl From<&Detection> for RawDetection {
    fn from(d: &Detection) -> Self {
        Self {
            frame_index: d.frame_index,
            entity_class: d.entity_class.clone(),
            bbox: d.bbox.into(),
            confidence: d.confidence,
        }
    }
}

/// Checks a manifest against its frame embeddings and detections.
///
/// Never fails; every violated invariant is listed in the report.
pub fn validate_manifest(
    manifest: &VideoManifest,
    frame_embeds: &EmbeddingMatrix,
    detections: &[RawDetection],
) -> ValidationReport {
    let mut issues = manifest.issues();
    let t = manifest.frame_count();
    let rows = frame_embeds.rows() as u32;
    for frame in (rows + 1)..=t {
        issues.push(ValidationIssue::MissingEmbedding { frame });
    }
    if rows > t {
        issues.push(ValidationIssue::ExtraEmbeddingRows {
            expected: t,
            found: rows,
        });
    }
    if !frame_embeds.is_normalized(1e-6) {
        issues.push(ValidationIssue::UnnormalizedEmbeddings);
    }
    for d in detections {
        if d.frame_index == 0 || d.frame_index > t {
            issues.push(ValidationIssue::FrameOutOfRange {
                frame: d.frame_index,
                frame_count: t,
            });
        }
        if BoundingBox::try_from(d.bbox).is_err() {
            issues.push(ValidationIssue::DegenerateBox {
                frame: d.frame_index,
                entity_class: d.entity_class.clone(),
            });
        }
        if !(0.0..=1.0).contains(&d.confidence) {
            issues.push(ValidationIssue::ConfidenceOutOfRange {
                frame: d.frame_index,
                confidence: d.confidence,
            });
        }
    }
    ValidationReport {
        video_id: manifest.video_id.clone(),
        issues,
    }
}
