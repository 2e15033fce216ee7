//! Aggregates run traces: token cost per video, alignment histograms and
//! discard reasons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{read_ndjson, IngestError};
use crate::llm::{Pricing, TokenUsage};
use crate::pipeline::VideoTrace;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("trace file {0} does not exist")]
    MissingTrace(PathBuf),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Cost rounded to the 5 decimals it is reported with.
pub fn displayed_cost(cost: f64) -> f64 {
    (cost * 1e5).round() / 1e5
}

pub fn format_cost(cost: f64) -> String {
    format!("${:.5}", displayed_cost(cost))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCost {
    pub video_id: String,
    pub usage: TokenUsage,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiscardCounts {
    /// Sentences merged away by the frame-count cap.
    pub capped_sentences: usize,
    pub passthrough_captions: usize,
    pub unaligned_sentences: usize,
    pub unparseable_sentences: usize,
    pub unmapped_subject: usize,
    pub unmapped_predicate: usize,
    pub unmapped_object: usize,
    pub outside_top_n: usize,
    pub unaligned_sentence_triplets: usize,
    pub ungrounded_triplets: usize,
}

impl DiscardCounts {
    fn add(&mut self, o: &Self) {
        self.capped_sentences += o.capped_sentences;
        self.passthrough_captions += o.passthrough_captions;
        self.unaligned_sentences += o.unaligned_sentences;
        self.unparseable_sentences += o.unparseable_sentences;
        self.unmapped_subject += o.unmapped_subject;
        self.unmapped_predicate += o.unmapped_predicate;
        self.unmapped_object += o.unmapped_object;
        self.outside_top_n += o.outside_top_n;
        self.unaligned_sentence_triplets += o.unaligned_sentence_triplets;
        self.ungrounded_triplets += o.ungrounded_triplets;
    }

    fn rows(&self) -> [(&'static str, usize); 10] {
        [
            ("capped sentences", self.capped_sentences),
            ("passthrough captions", self.passthrough_captions),
            ("unaligned sentences", self.unaligned_sentences),
            ("unparseable sentences", self.unparseable_sentences),
            ("unmapped subject", self.unmapped_subject),
            ("unmapped predicate", self.unmapped_predicate),
            ("unmapped object", self.unmapped_object),
            ("outside top-N", self.outside_top_n),
            ("triplets of unaligned sentences", self.unaligned_sentence_triplets),
            ("ungrounded triplets", self.ungrounded_triplets),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub pricing: Pricing,
    pub per_video: Vec<VideoCost>,
    pub usage: TokenUsage,
    /// Cost of the summed usage.
    pub total_cost: f64,
    pub sentences_per_caption: BTreeMap<usize, usize>,
    pub interval_lengths: BTreeMap<u32, usize>,
    /// Steepest-decline gaps binned by tenths: key `b` counts gaps in
    /// `[b / 10, (b + 1) / 10)`.
    pub steepest_gap_bins: BTreeMap<u32, usize>,
    pub discards: DiscardCounts,
}

fn gap_bin(gap: f64) -> u32 {
    (gap.max(0.0) * 10.0).floor() as u32
}

impl StatsReport {
    pub fn empty(pricing: Pricing) -> Self {
        Self {
            pricing,
            ..Self::default()
        }
    }

    pub fn add_trace(&mut self, t: &VideoTrace) {
        let usage = t.usage();
        self.per_video.push(VideoCost {
            video_id: t.video_id.clone(),
            usage,
            cost: usage.estimated_cost(&self.pricing),
        });
        self.usage += usage;
        self.total_cost = self.usage.estimated_cost(&self.pricing);
        *self.sentences_per_caption.entry(t.sentences).or_default() += 1;
        for s in &t.alignment.sentences {
            match s.aligned_frames {
                Some(iv) => *self.interval_lengths.entry(iv.len()).or_default() += 1,
                None => self.discards.unaligned_sentences += 1,
            }
            if let Some(gap) = s.steepest_gap {
                *self.steepest_gap_bins.entry(gap_bin(gap)).or_default() += 1;
            }
        }
        self.discards.add(&DiscardCounts {
            capped_sentences: t.raw_sentences - t.sentences,
            passthrough_captions: usize::from(t.passthrough),
            unparseable_sentences: t.unparseable_sentences,
            unmapped_subject: t.mapping.unmapped_subject,
            unmapped_predicate: t.mapping.unmapped_predicate,
            unmapped_object: t.mapping.unmapped_object,
            outside_top_n: t.mapping.outside_top_n,
            unaligned_sentence_triplets: t.ground.unaligned_sentence,
            ungrounded_triplets: t.ground.ungrounded,
            ..DiscardCounts::default()
        });
    }

    /// Folds another shard into this one. Both must use the same pricing.
    pub fn merge(&mut self, other: &Self) {
        self.per_video.extend(other.per_video.iter().cloned());
        self.usage += other.usage;
        self.total_cost = self.usage.estimated_cost(&self.pricing);
        for (k, v) in &other.sentences_per_caption {
            *self.sentences_per_caption.entry(*k).or_default() += v;
        }
        for (k, v) in &other.interval_lengths {
            *self.interval_lengths.entry(*k).or_default() += v;
        }
        for (k, v) in &other.steepest_gap_bins {
            *self.steepest_gap_bins.entry(*k).or_default() += v;
        }
        self.discards.add(&other.discards);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "videos: {}", self.per_video.len());
        let _ = writeln!(
            out,
            "tokens: {} in, {} out, {}",
            self.usage.input_tokens,
            self.usage.output_tokens,
            format_cost(self.total_cost)
        );
        if !self.per_video.is_empty() {
            let _ = writeln!(out, "per video:");
            for v in &self.per_video {
                let _ = writeln!(
                    out,
                    "  {:<16} {:>7} in {:>6} out  {}",
                    v.video_id,
                    v.usage.input_tokens,
                    v.usage.output_tokens,
                    format_cost(v.cost)
                );
            }
        }
        let hist = |out: &mut String, title: &str, rows: Vec<(String, usize)>| {
            if rows.is_empty() {
                return;
            }
            let _ = writeln!(out, "{title}:");
            for (k, v) in rows {
                let _ = writeln!(out, "  {k:>12} {v}");
            }
        };
        hist(
            &mut out,
            "sentences per caption",
            self.sentences_per_caption
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        );
        hist(
            &mut out,
            "aligned interval length",
            self.interval_lengths.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        );
        hist(
            &mut out,
            "steepest-decline gap",
            self.steepest_gap_bins
                .iter()
                .map(|(b, v)| (format!("[{:.1}, {:.1})", *b as f64 / 10.0, (*b + 1) as f64 / 10.0), *v))
                .collect(),
        );
        let discards: Vec<(String, usize)> = self
            .discards
            .rows()
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(k, n)| (k.to_string(), n))
            .collect();
        if !discards.is_empty() {
            let _ = writeln!(out, "discarded:");
            for (k, v) in discards {
                let _ = writeln!(out, "  {k:<32} {v}");
            }
        }
        out
    }
}

pub fn read_traces(path: &Path) -> Result<Vec<VideoTrace>, StatsError> {
    if !path.exists() {
        return Err(StatsError::MissingTrace(path.to_path_buf()));
    }
    Ok(read_ndjson(path)?.into_iter().map(|(_, t)| t).collect())
}

/// Aggregates trace files in the given order. No files gives an empty
/// report.
pub fn stats(trace_paths: &[PathBuf], pricing: Pricing) -> Result<StatsReport, StatsError> {
    let mut report = StatsReport::empty(pricing);
    for p in trace_paths {
        for t in read_traces(p)? {
            report.add_trace(&t);
        }
    }
    Ok(report)
}
