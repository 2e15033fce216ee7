//! Sentence-to-frame alignment by clustering frames and keeping the
//! clusters that score above the steepest similarity drop.

mod cluster;
mod kmeans;
mod prune;
mod select;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{dot, EmbeddingMatrix, FrameIndex, FrameInterval, SegmentedSentence};

pub use cluster::{Agglomerative, FrameClusterer, Gmm, KMeans};
pub use kmeans::{kmeans, KMeansParams};
pub use prune::{prune_temporal, TemporalPruner};
pub use select::{rank_and_select, select_clusters, Selection, SelectionMode};

#[derive(Debug, Error)]
pub enum AdvError {
    #[error("embedding dimension mismatch: sentences have {sentences}, frames have {frames}")]
    DimensionMismatch { sentences: usize, frames: usize },
    #[error("{sentences} sentences but {rows} sentence embedding rows")]
    SentenceCountMismatch { sentences: usize, rows: usize },
    #[error("clustering covers {assigned} frames but there are {frames}")]
    AssignmentMismatch { assigned: usize, frames: usize },
    #[error("video has no frames")]
    NoFrames,
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    #[default]
    Kmeans,
    Agglomerative,
    Gmm,
}

impl FromStr for ClusteringMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "agglomerative" => Ok(Self::Agglomerative),
            "gmm" => Ok(Self::Gmm),
            _ => Err(format!("unknown clustering method {s:?}")),
        }
    }
}

impl fmt::Display for ClusteringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Kmeans => "kmeans",
            Self::Agglomerative => "agglomerative",
            Self::Gmm => "gmm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    /// Average number of frames per cluster.
    pub beta: u32,
    pub clustering: ClusteringMethod,
    pub selection: SelectionMode,
    /// Set from the pipeline seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            beta: 4,
            clustering: ClusteringMethod::Kmeans,
            selection: SelectionMode::SteepestDecline,
            seed: 0,
            kmeans_max_iters: 100,
            kmeans_restarts: 5,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), AdvError> {
        if self.beta < 1 {
            return Err(AdvError::InvalidConfig("beta must be at least 1".into()));
        }
        if self.kmeans_restarts < 1 {
            return Err(AdvError::InvalidConfig("kmeans_restarts must be at least 1".into()));
        }
        self.selection.validate().map_err(AdvError::InvalidConfig)
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            seed: self.seed,
            max_iters: self.kmeans_max_iters,
            restarts: self.kmeans_restarts,
            ..KMeansParams::default()
        }
    }

    pub fn clusterer(&self) -> Box<dyn FrameClusterer + Send + Sync> {
        match self.clustering {
            ClusteringMethod::Kmeans => Box::new(KMeans(self.kmeans_params())),
            ClusteringMethod::Agglomerative => Box::new(Agglomerative),
            ClusteringMethod::Gmm => Box::new(Gmm {
                init: self.kmeans_params(),
                iters: 50,
            }),
        }
    }
}

/// Number of clusters for a video of `t_frames` frames.
pub fn choose_k(t_frames: usize, beta: u32) -> usize {
    assert!(t_frames >= 1 && beta >= 1, "choose_k needs t_frames >= 1 and beta >= 1");
    t_frames.div_ceil(beta as usize).clamp(1, t_frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id per frame row; frame `i + 1` is row `i`.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Fewer distinct frames than requested clusters.
    pub degenerate: bool,
}

impl ClusteringResult {
    /// Relabels clusters in order of first appearance along the frame axis.
    pub(crate) fn canonical(centroids: Vec<Vec<f64>>, assignment: Vec<usize>, inertia: f64, degenerate: bool) -> Self {
        let mut relabel = vec![usize::MAX; centroids.len()];
        let mut next = 0;
        for &a in &assignment {
            if relabel[a] == usize::MAX {
                relabel[a] = next;
                next += 1;
            }
        }
        let mut ordered = vec![Vec::new(); next];
        for (old, c) in centroids.into_iter().enumerate() {
            if relabel[old] != usize::MAX {
                ordered[relabel[old]] = c;
            }
        }
        Self {
            k: next,
            centroids: ordered,
            assignment: assignment.into_iter().map(|a| relabel[a]).collect(),
            inertia,
            degenerate,
        }
    }

    /// Frames (1-based) belonging to `cluster`.
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = FrameIndex> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == cluster)
            .map(|(i, _)| i as FrameIndex + 1)
    }
}

fn to_points(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Clusters the rows of a normalized frame embedding matrix into
/// `choose_k(T, beta)` groups.
pub fn cluster_frames(frame_embeds: &EmbeddingMatrix, config: &AdvConfig) -> Result<ClusteringResult, AdvError> {
    config.validate()?;
    if frame_embeds.rows() == 0 {
        return Err(AdvError::NoFrames);
    }
    let k = choose_k(frame_embeds.rows(), config.beta);
    Ok(config.clusterer().cluster(&to_points(frame_embeds), k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceTrace {
    pub order_index: u32,
    /// Cosine similarity to each centroid, by cluster id.
    pub similarities: Vec<f64>,
    pub sorted_clusters: Vec<usize>,
    pub selected_clusters: Vec<usize>,
    pub steepest_gap: Option<f64>,
    pub candidate_frames: Vec<FrameIndex>,
    pub surviving_frames: Vec<FrameIndex>,
    pub aligned_frames: Option<FrameInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub video_id: String,
    pub k: usize,
    pub degenerate: bool,
    pub sentences: Vec<SentenceTrace>,
}

fn cosine_to_centroid(sentence: &[f32], centroid: &[f64]) -> f64 {
    let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    let s_norm = sentence.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let raw: f64 = sentence.iter().zip(centroid).map(|(&s, c)| s as f64 * c).sum();
    raw / (norm * s_norm.max(f64::MIN_POSITIVE))
}

/// Maximal run of consecutive frames in `frames` that contains `anchor`.
fn run_containing(frames: &BTreeSet<FrameIndex>, anchor: FrameIndex) -> FrameInterval {
    let mut lo = anchor;
    while lo > 1 && frames.contains(&(lo - 1)) {
        lo -= 1;
    }
    let mut hi = anchor;
    while frames.contains(&(hi + 1)) {
        hi += 1;
    }
    FrameInterval::new(lo, hi).expect("lo <= hi")
}

/// Aligns each sentence with a consecutive frame interval.
///
/// Sentences are processed in `order_index` order. Each surviving frame set
/// is reduced to the run around its anchor: the frame whose cluster scores
/// highest for the sentence, then the frame closest to the sentence, then
/// the earliest frame. That run is what later sentences are pruned against.
pub fn align_sentences(
    sentences: &[SegmentedSentence],
    sentence_embeds: &EmbeddingMatrix,
    frame_embeds: &EmbeddingMatrix,
    clustering: &ClusteringResult,
    config: &AdvConfig,
) -> Result<(Vec<SegmentedSentence>, AlignmentTrace), AdvError> {
    if sentences.len() != sentence_embeds.rows() {
        return Err(AdvError::SentenceCountMismatch {
            sentences: sentences.len(),
            rows: sentence_embeds.rows(),
        });
    }
    if sentence_embeds.dim() != frame_embeds.dim() {
        return Err(AdvError::DimensionMismatch {
            sentences: sentence_embeds.dim(),
            frames: frame_embeds.dim(),
        });
    }
    if clustering.assignment.len() != frame_embeds.rows() {
        return Err(AdvError::AssignmentMismatch {
            assigned: clustering.assignment.len(),
            frames: frame_embeds.rows(),
        });
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by_key(|&i| sentences[i].order_index);

    let mut pruner = TemporalPruner::new();
    let mut aligned = sentences.to_vec();
    let mut traces = Vec::with_capacity(sentences.len());
    for i in order {
        let s_vec = sentence_embeds.row(i);
        let similarities: Vec<f64> = clustering
            .centroids
            .iter()
            .map(|c| cosine_to_centroid(s_vec, c))
            .collect();
        let selection = rank_and_select(&similarities, config.selection);
        let candidates: BTreeSet<FrameIndex> = selection
            .clusters()
            .iter()
            .flat_map(|&c| clustering.members(c))
            .collect();
        let surviving = pruner.admit(&candidates);
        let interval = surviving
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let key = |f: FrameIndex| {
                    let row = f as usize - 1;
                    (
                        similarities[clustering.assignment[row]],
                        dot(s_vec, frame_embeds.row(row)),
                    )
                };
                let (ka, kb) = (key(a), key(b));
                ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(b.cmp(&a))
            })
            .map(|anchor| run_containing(&surviving, anchor));
        if let Some(iv) = interval {
            pruner.commit(&iv.frames().collect());
        }
        aligned[i].aligned_frames = interval;
        traces.push(SentenceTrace {
            order_index: sentences[i].order_index,
            similarities,
            sorted_clusters: selection.order.clone(),
            selected_clusters: selection.clusters().to_vec(),
            steepest_gap: selection.gap,
            candidate_frames: candidates.into_iter().collect(),
            surviving_frames: surviving.into_iter().collect(),
            aligned_frames: interval,
        });
    }
    Ok((
        aligned,
        AlignmentTrace {
            video_id: String::new(),
            k: clustering.k,
            degenerate: clustering.degenerate,
            sentences: traces,
        },
    ))
}

/// Clusters one video's frames and aligns its sentences.
pub fn align_video(
    video_id: &str,
    sentences: &[SegmentedSentence],
    sentence_embeds: &EmbeddingMatrix,
    frame_embeds: &EmbeddingMatrix,
    config: &AdvConfig,
) -> Result<(Vec<SegmentedSentence>, AlignmentTrace), AdvError> {
    let clustering = cluster_frames(frame_embeds, config)?;
    let (aligned, mut trace) = align_sentences(sentences, sentence_embeds, frame_embeds, &clustering, config)?;
    trace.video_id = video_id.to_string();
    Ok((aligned, trace))
}
