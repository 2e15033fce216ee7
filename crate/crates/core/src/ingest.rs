//! On-disk formats and loaders.
//!
//! A dataset root looks like:
//!
//! ```text
//! manifest.ndjson
//! embeddings/<video_id>.frames.nlve
//! embeddings/<video_id>.sentences.nlve   (written by an external embedder after segmentation)
//! detections/<video_id>.ndjson
//! gt/<video_id>.ndjson                   (optional)
//! ```
//!
//! Embedding files are binary: the magic `NLVE`, then little-endian `u32`
//! dim and `u32` row count, then each row id as a `u32` byte length
//! followed by UTF-8 bytes, then `rows * dim` little-endian `f32` values.
//! Everything else is NDJSON, one record per line.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::model::{
    validate_manifest, BoundingBox, Detection, EmbeddingMatrix, FrameIndex, FrameInterval, ModelError, Provenance,
    RawDetection, SceneGraph, SegmentedSentence, Triplet, ValidationIssue, VideoManifest,
};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"NLVE";
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.2;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    #[error("{path}: declared dim {declared} but found {found}")]
    DimensionMismatch {
        path: PathBuf,
        declared: usize,
        found: usize,
    },
    #[error("{path}: {found} rows for {expected} entries")]
    RowCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("duplicate video id {0}")]
    DuplicateVideoId(String),
    #[error("{path}: malformed embedding file: {reason}")]
    MalformedEmbedding { path: PathBuf, reason: String },
    #[error("video {video_id}: {}", issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid {
        video_id: String,
        issues: Vec<ValidationIssue>,
    },
    #[error("io failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile(path.to_path_buf())
        } else {
            IngestError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Detections below this confidence are dropped at load time.
    pub confidence_floor: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
        }
    }
}

/// Everything the pipeline reads for a set of videos.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetBundle {
    /// Sorted by `video_id`.
    pub manifests: Vec<VideoManifest>,
    pub embeddings: BTreeMap<String, EmbeddingMatrix>,
    /// Per video, canonically ordered (see [`canonical_detection_order`]).
    pub detections: BTreeMap<String, Vec<Detection>>,
    pub gt_graphs: Option<BTreeMap<String, SceneGraph>>,
}

impl DatasetBundle {
    pub fn manifest(&self, video_id: &str) -> Option<&VideoManifest> {
        self.manifests
            .binary_search_by(|m| m.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.manifests[i])
    }

    pub fn detections_for(&self, video_id: &str) -> &[Detection] {
        self.detections.get(video_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Total order used for detections so that loading does not depend on
/// line order.
pub fn canonical_detection_order(a: &Detection, b: &Detection) -> Ordering {
    let ab: [f64; 4] = a.bbox.into();
    let bb: [f64; 4] = b.bbox.into();
    a.frame_index
        .cmp(&b.frame_index)
        .then_with(|| a.entity_class.cmp(&b.entity_class))
        .then_with(|| b.confidence.total_cmp(&a.confidence))
        .then_with(|| {
            ab.iter()
                .zip(&bb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.ndjson")
}

pub fn frame_embeddings_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("embeddings").join(format!("{video_id}.frames.nlve"))
}

pub fn sentence_embeddings_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("embeddings").join(format!("{video_id}.sentences.nlve"))
}

pub fn detections_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("detections").join(format!("{video_id}.ndjson"))
}

pub fn gt_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("gt").join(format!("{video_id}.ndjson"))
}

// ---------------------------------------------------------------------------
// embeddings

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.as_slice().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    for id in m.row_ids() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes an embedding file. `path` is only used in error messages.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix, IngestError> {
    let malformed = |reason: &str| IngestError::MalformedEmbedding {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4) != Some(EMBEDDING_MAGIC.as_slice()) {
        return Err(malformed("bad magic"));
    }
    let dim = cur.u32().ok_or_else(|| malformed("truncated header"))? as usize;
    let rows = cur.u32().ok_or_else(|| malformed("truncated header"))? as usize;
    if dim == 0 {
        return Err(malformed("dim is zero"));
    }
    let mut row_ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        let len = cur.u32().ok_or_else(|| malformed("truncated row id"))? as usize;
        let raw = cur.take(len).ok_or_else(|| malformed("truncated row id"))?;
        let id = std::str::from_utf8(raw).map_err(|_| malformed("row id is not UTF-8"))?;
        row_ids.push(id.to_string());
    }
    let payload = &bytes[cur.pos..];
    if !payload.len().is_multiple_of(4) {
        return Err(malformed("payload is not a whole number of f32 values"));
    }
    let values = payload.len() / 4;
    if values != rows * dim {
        let found = values.checked_div(rows).unwrap_or(values);
        return Err(IngestError::DimensionMismatch {
            path: path.to_path_buf(),
            declared: dim,
            found,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(row_ids, dim, data).map_err(|e| malformed(&e.to_string()))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_embeddings(&bytes, path)
}

/// Reads an embedding file and scales its rows to unit length.
pub fn read_normalized_embeddings(path: &Path) -> Result<EmbeddingMatrix, IngestError> {
    read_embeddings(path)?
        .normalized()
        .map_err(|e: ModelError| IngestError::MalformedEmbedding {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), IngestError> {
    ensure_parent(path)?;
    fs::write(path, encode_embeddings(m)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// NDJSON helpers

/// Reads every non-blank line of `path` as a `T`, with 1-based line numbers.
pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| IngestError::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    Ok(())
}

/// Writes records one per line. An empty slice yields an empty file.
pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IngestError> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| IngestError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// manifests

pub fn read_manifests(path: &Path) -> Result<Vec<VideoManifest>, IngestError> {
    let mut seen = BTreeSet::new();
    let mut manifests = Vec::new();
    for (line, m) in read_ndjson::<VideoManifest>(path)? {
        let issues = m.issues();
        if !issues.is_empty() {
            return Err(IngestError::MalformedRecord {
                path: path.to_path_buf(),
                line,
                reason: issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            });
        }
        if !seen.insert(m.video_id.clone()) {
            return Err(IngestError::DuplicateVideoId(m.video_id));
        }
        manifests.push(m);
    }
    manifests.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(manifests)
}

pub fn write_manifests(path: &Path, manifests: &[VideoManifest]) -> Result<(), IngestError> {
    let mut sorted: Vec<&VideoManifest> = manifests.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    write_ndjson(path, &sorted)
}

// ---------------------------------------------------------------------------
// detections

/// Reads raw detection records without filtering or validation.
pub fn read_raw_detections(path: &Path) -> Result<Vec<(usize, RawDetection)>, IngestError> {
    read_ndjson(path)
}

/// Reads, validates and filters the detections of one video.
pub fn read_detections(path: &Path, frame_count: u32, config: &IngestConfig) -> Result<Vec<Detection>, IngestError> {
    let mut out = Vec::new();
    for (line, raw) in read_raw_detections(path)? {
        let malformed = |reason: String| IngestError::MalformedRecord {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if raw.frame_index == 0 || raw.frame_index > frame_count {
            return Err(malformed(format!(
                "frame {} outside 1..={frame_count}",
                raw.frame_index
            )));
        }
        if !(0.0..=1.0).contains(&raw.confidence) {
            return Err(malformed(format!("confidence {} outside [0, 1]", raw.confidence)));
        }
        let bbox = BoundingBox::try_from(raw.bbox).map_err(|e| malformed(e.to_string()))?;
        if raw.confidence < config.confidence_floor {
            continue;
        }
        out.push(Detection {
            frame_index: raw.frame_index,
            entity_class: raw.entity_class,
            bbox,
            confidence: raw.confidence,
        });
    }
    out.sort_by(canonical_detection_order);
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<(), IngestError> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| canonical_detection_order(a, b));
    let raw: Vec<RawDetection> = sorted.into_iter().map(RawDetection::from).collect();
    write_ndjson(path, &raw)
}

// ---------------------------------------------------------------------------
// scene graphs and pseudo-labels

/// One triplet of one frame of one video; the line format of scene-graph,
/// pseudo-label, ground-truth and prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub video_id: String,
    pub frame_index: FrameIndex,
    pub subject_class: String,
    pub predicate_class: String,
    pub object_class: String,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub provenance: Provenance,
}

impl TripletRecord {
    pub fn from_triplet(video_id: &str, t: &Triplet) -> Option<Self> {
        Some(Self {
            video_id: video_id.to_string(),
            frame_index: t.frame_index?,
            subject_class: t.subject_class.clone(),
            predicate_class: t.predicate_class.clone(),
            object_class: t.object_class.clone(),
            subject_box: t.subject_box?,
            object_box: t.object_box?,
            score: t.score,
            provenance: t.provenance,
        })
    }

    pub fn into_triplet(self) -> (String, Triplet) {
        let t = Triplet {
            subject_class: self.subject_class,
            predicate_class: self.predicate_class,
            object_class: self.object_class,
            subject_box: Some(self.subject_box),
            object_box: Some(self.object_box),
            frame_index: Some(self.frame_index),
            score: self.score,
            provenance: self.provenance,
        };
        (self.video_id, t)
    }

    fn sort_key(&self) -> (&str, FrameIndex, &str, &str, &str) {
        (
            &self.video_id,
            self.frame_index,
            &self.subject_class,
            &self.predicate_class,
            &self.object_class,
        )
    }
}

/// Flattens graphs into records in the stable output order:
/// `(video_id, frame_index, subject, predicate, object)`, ties kept in
/// insertion order.
pub fn graph_records(graphs: &[SceneGraph]) -> Vec<TripletRecord> {
    let mut records: Vec<TripletRecord> = graphs
        .iter()
        .flat_map(|g| {
            g.triplets()
                .filter_map(move |t| TripletRecord::from_triplet(&g.video_id, t))
        })
        .collect();
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    records
}

pub fn write_scene_graphs(graphs: &[SceneGraph], path: &Path) -> Result<(), IngestError> {
    write_ndjson(path, &graph_records(graphs))
}

/// Groups records back into per-video graphs, sorted by video id.
pub fn records_to_graphs(records: impl IntoIterator<Item = TripletRecord>) -> Vec<SceneGraph> {
    let mut graphs: BTreeMap<String, SceneGraph> = BTreeMap::new();
    for r in records {
        let (video_id, t) = r.into_triplet();
        graphs
            .entry(video_id.clone())
            .or_insert_with(|| SceneGraph::new(video_id))
            .insert(t);
    }
    graphs.into_values().collect()
}

pub fn read_triplet_records(path: &Path) -> Result<Vec<TripletRecord>, IngestError> {
    Ok(read_ndjson(path)?.into_iter().map(|(_, r)| r).collect())
}

pub fn read_scene_graphs(path: &Path) -> Result<Vec<SceneGraph>, IngestError> {
    let mut records = read_triplet_records(path)?;
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(records_to_graphs(records))
}

// ---------------------------------------------------------------------------
// segmented sentences

/// A segmented (and possibly aligned) sentence of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub video_id: String,
    pub order_index: u32,
    pub text: String,
    #[serde(default)]
    pub aligned_frames: Option<FrameInterval>,
}

pub fn sentence_records(per_video: &BTreeMap<String, Vec<SegmentedSentence>>) -> Vec<SentenceRecord> {
    per_video
        .iter()
        .flat_map(|(vid, sentences)| {
            sentences.iter().map(move |s| SentenceRecord {
                video_id: vid.clone(),
                order_index: s.order_index,
                text: s.text.clone(),
                aligned_frames: s.aligned_frames,
            })
        })
        .collect()
}

pub fn write_sentences(path: &Path, per_video: &BTreeMap<String, Vec<SegmentedSentence>>) -> Result<(), IngestError> {
    write_ndjson(path, &sentence_records(per_video))
}

pub fn read_sentences(path: &Path) -> Result<BTreeMap<String, Vec<SegmentedSentence>>, IngestError> {
    let mut out: BTreeMap<String, Vec<SegmentedSentence>> = BTreeMap::new();
    for (_, r) in read_ndjson::<SentenceRecord>(path)? {
        out.entry(r.video_id).or_default().push(SegmentedSentence {
            order_index: r.order_index,
            text: r.text,
            aligned_frames: r.aligned_frames,
        });
    }
    for (vid, sentences) in out.iter_mut() {
        sentences.sort_by_key(|s| s.order_index);
        let contiguous = sentences
            .iter()
            .enumerate()
            .all(|(i, s)| s.order_index as usize == i + 1);
        if !contiguous {
            return Err(IngestError::MalformedRecord {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("order indices of {vid} are not contiguous from 1"),
            });
        }
    }
    Ok(out)
}

/// An unlocalized triplet parsed from one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub video_id: String,
    pub order_index: u32,
    pub subject_class: String,
    pub predicate_class: String,
    pub object_class: String,
}

// ---------------------------------------------------------------------------
// bundle

struct VideoFiles {
    embeddings: EmbeddingMatrix,
    detections: Vec<Detection>,
    gt: Option<SceneGraph>,
}

fn load_video(root: &Path, manifest: &VideoManifest, config: &IngestConfig) -> Result<VideoFiles, IngestError> {
    let vid = &manifest.video_id;
    let t = manifest.frame_count();
    let emb_path = frame_embeddings_path(root, vid);
    let embeddings = read_normalized_embeddings(&emb_path)?;
    if embeddings.rows() != t as usize {
        return Err(IngestError::RowCountMismatch {
            path: emb_path,
            expected: t as usize,
            found: embeddings.rows(),
        });
    }
    let det_path = detections_path(root, vid);
    let detections = read_detections(&det_path, t, config)?;
    let report = validate_manifest(manifest, &embeddings, &[]);
    if !report.is_empty() {
        return Err(IngestError::Invalid {
            video_id: vid.clone(),
            issues: report.issues,
        });
    }
    let gt_file = gt_path(root, vid);
    let gt = if gt_file.exists() {
        let records = read_triplet_records(&gt_file)?;
        if let Some(r) = records.iter().find(|r| r.video_id != *vid || r.frame_index > t) {
            return Err(IngestError::MalformedRecord {
                path: gt_file.clone(),
                line: 0,
                reason: format!(
                    "record for {} frame {} does not belong to {vid}",
                    r.video_id, r.frame_index
                ),
            });
        }
        Some(
            records_to_graphs(records)
                .pop()
                .unwrap_or_else(|| SceneGraph::new(vid.clone())),
        )
    } else {
        None
    };
    Ok(VideoFiles {
        embeddings,
        detections,
        gt,
    })
}

/// Loads and validates a dataset root. Per-video files are read with
/// `exec`.
pub fn load_bundle_with(root: &Path, config: &IngestConfig, exec: Execution) -> Result<DatasetBundle, IngestError> {
    let manifests = read_manifests(&manifest_path(root))?;
    let files = exec.try_map(&manifests, |m| load_video(root, m, config))?;
    let mut bundle = DatasetBundle::default();
    let mut gt = BTreeMap::new();
    for (m, f) in manifests.iter().zip(files) {
        bundle.embeddings.insert(m.video_id.clone(), f.embeddings);
        bundle.detections.insert(m.video_id.clone(), f.detections);
        if let Some(g) = f.gt {
            gt.insert(m.video_id.clone(), g);
        }
    }
    if !gt.is_empty() {
        bundle.gt_graphs = Some(gt);
    }
    bundle.manifests = manifests;
    Ok(bundle)
}

pub fn load_bundle(root: &Path, config: &IngestConfig) -> Result<DatasetBundle, IngestError> {
    load_bundle_with(root, config, Execution::Parallel)
}

/// Loads the sentence embeddings of one video and checks them against the
/// number of segmented sentences and the frame embedding dim.
pub fn load_sentence_embeddings(
    root: &Path,
    video_id: &str,
    sentence_count: usize,
    frame_dim: usize,
) -> Result<EmbeddingMatrix, IngestError> {
    let path = sentence_embeddings_path(root, video_id);
    let m = read_normalized_embeddings(&path)?;
    if m.rows() != sentence_count {
        return Err(IngestError::RowCountMismatch {
            path,
            expected: sentence_count,
            found: m.rows(),
        });
    }
    if m.dim() != frame_dim {
        return Err(IngestError::DimensionMismatch {
            path,
            declared: frame_dim,
            found: m.dim(),
        });
    }
    Ok(m)
}
