//! End-to-end orchestration over a dataset root.
//!
//! [`Pipeline::run_all`] runs segment, align, parse, ground and negative
//! labeling in memory and writes its outputs only after every stage has
//! succeeded. The `*_stage` methods run one stage at a time against the
//! same output files, so a run can also be split across invocations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adv::{align_video, AdvConfig, AlignmentTrace};
use crate::eval::{instances_from_graphs, recall_at_k_with, EvalConfig, RecallReport};
use crate::exec::Execution;
use crate::ingest::{
    detections_path, frame_embeddings_path, graph_records, load_bundle_with, load_sentence_embeddings, manifest_path,
    read_embeddings, read_manifests, read_ndjson, read_raw_detections, read_scene_graphs, read_sentences,
    read_triplet_records, records_to_graphs, write_ndjson, write_sentences, DatasetBundle, IngestConfig, IngestError,
    ParsedRecord,
};
use crate::llm::{ChatTransport, ClientOptions, LlmClient, ResponseCache, TokenUsage};
use crate::model::{
    validate_manifest, Provenance, SceneGraph, SegmentedSentence, Triplet, ValidationReport, VideoManifest, Vocabulary,
};
use crate::plm::{assign_negatives, build_all_candidates, collect_unaligned_runs, PlmConfig};
use crate::sgparse::{
    ground_triplets, parse_triplets, top_predicates, ClassMapper, MappingMode, MappingStats, ParseConfig,
};
use crate::tcs::{cap_sentences, segment_caption, TcsConfig, TcsMode};

pub const SEGMENTS_FILE: &str = "segments.ndjson";
pub const PARSED_FILE: &str = "parsed.ndjson";
pub const PSEUDO_LABELS_FILE: &str = "pseudo_labels.ndjson";
pub const TRACE_FILE: &str = "trace.ndjson";
pub const ALIGNMENT_TRACE_FILE: &str = "alignment_trace.ndjson";
pub const REPORT_FILE: &str = "run_report.json";

/// Outputs of [`Pipeline::run_all`] that are byte-identical across runs with
/// the same config, seed and cassettes. The run report is not among them
/// because it records wall time.
pub const DETERMINISTIC_OUTPUTS: [&str; 4] = [SEGMENTS_FILE, PARSED_FILE, PSEUDO_LABELS_FILE, TRACE_FILE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Segment,
    Align,
    Parse,
    Ground,
    Plm,
    Eval,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Config => "config",
            Self::Ingest => "ingest",
            Self::Segment => "segment",
            Self::Align => "align",
            Self::Parse => "parse",
            Self::Ground => "ground",
            Self::Plm => "plm",
            Self::Eval => "eval",
            Self::Write => "write",
        })
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// The first fatal error of a run, tagged with the stage that raised it.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    validation: bool,
    #[source]
    source: BoxError,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<BoxError>) -> Self {
        Self {
            stage,
            validation: false,
            source: source.into(),
        }
    }

    /// An error caused by invalid input or configuration rather than by
    /// the run itself.
    pub fn validation(stage: Stage, source: impl Into<BoxError>) -> Self {
        Self {
            stage,
            validation: true,
            source: source.into(),
        }
    }

    pub fn is_validation(&self) -> bool {
        self.validation
    }

    fn ingest(stage: Stage, e: IngestError) -> Self {
        match e {
            IngestError::MissingFile(_) | IngestError::Io { .. } => Self::new(stage, e),
            _ => Self::validation(stage, e),
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    /// Response cache; recorded cassettes live here.
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Vocabulary JSON; `None` uses the bundled Action Genome vocabulary.
    pub vocabulary: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            cache_dir: PathBuf::from("llm_cache"),
            output_dir: PathBuf::from("out"),
            vocabulary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` leaves the pool size to the runtime.
    pub threads: Option<usize>,
    pub execution: Execution,
    /// Forbid network access; every LLM call must replay a cassette.
    pub offline: bool,
    pub skip_plm: bool,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub tcs: TcsConfig,
    pub adv: AdvConfig,
    pub parse: ParseConfig,
    pub plm: PlmConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::validation(Stage::Config, e))
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Joins every relative path onto `base`.
    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.paths.data_root);
        join(&mut self.paths.cache_dir);
        join(&mut self.paths.output_dir);
        if let Some(p) = self.paths.vocabulary.as_mut() {
            join(p);
        }
        if let Some(p) = self.parse.lexicon_path.as_mut() {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |e: String| PipelineError::validation(Stage::Config, e);
        if self.threads == Some(0) {
            return Err(invalid("threads must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ingest.confidence_floor) {
            return Err(invalid(format!(
                "confidence_floor {} must lie in [0, 1]",
                self.ingest.confidence_floor
            )));
        }
        self.tcs.validate().map_err(|e| invalid(e.to_string()))?;
        self.adv.validate().map_err(|e| invalid(e.to_string()))?;
        self.parse.validate().map_err(|e| invalid(e.to_string()))?;
        self.plm.validate().map_err(|e| invalid(e.to_string()))?;
        self.eval.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// The alignment config with the pipeline seed applied.
    pub fn adv_config(&self) -> AdvConfig {
        AdvConfig {
            seed: self.seed,
            ..self.adv.clone()
        }
    }

    pub fn needs_llm(&self) -> bool {
        self.tcs.mode == TcsMode::Llm || self.parse.uses_llm()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, PipelineError> {
        let Some(path) = &self.paths.vocabulary else {
            return Ok(Vocabulary::action_genome());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("cannot read {}: {e}", path.display())))?;
        let vocab: Vocabulary = serde_json::from_str(&text)
            .map_err(|e| PipelineError::validation(Stage::Config, format!("{}: {e}", path.display())))?;
        vocab
            .validate()
            .map_err(|e| PipelineError::validation(Stage::Config, format!("{}: {e}", path.display())))?;
        Ok(vocab)
    }

    pub fn output_path(&self, file: &str) -> PathBuf {
        self.paths.output_dir.join(file)
    }
}

/// The client a config asks for: cassette replay only when offline, the
/// HTTP transport otherwise.
pub fn default_client(config: &PipelineConfig) -> LlmClient {
    let cache = ResponseCache::new(&config.paths.cache_dir);
    if config.offline {
        return LlmClient::offline(cache);
    }
    let options = ClientOptions {
        max_retries: config.tcs.max_retries,
        requests_per_second: config.tcs.requests_per_second,
        ..ClientOptions::default()
    };
    LlmClient::new(http_transport(config), Some(cache), options)
}

#[cfg(feature = "http")]
fn http_transport(config: &PipelineConfig) -> Option<Arc<dyn ChatTransport>> {
    Some(Arc::new(crate::llm::HttpTransport::from_env(
        config.tcs.endpoint.clone(),
        &config.tcs.api_key_env,
    )))
}

#[cfg(not(feature = "http"))]
fn http_transport(_config: &PipelineConfig) -> Option<Arc<dyn ChatTransport>> {
    log::warn!("built without the http feature; only cached responses are available");
    None
}

// ---------------------------------------------------------------------------
// stage results

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSegments {
    pub sentences: Vec<SegmentedSentence>,
    /// Sentence count before the frame-count cap.
    pub raw_count: usize,
    pub usage: TokenUsage,
    pub passthrough: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoParse {
    /// Mapped triplets with the order index of their sentence.
    pub triplets: Vec<(u32, Triplet)>,
    pub extracted: usize,
    pub unparseable_sentences: usize,
    pub mapping: MappingStats,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundCounts {
    /// Localized triplets written.
    pub grounded: usize,
    /// Mapped triplets whose sentence has no aligned interval.
    pub unaligned_sentence: usize,
    /// Mapped triplets not grounded in any frame of their interval.
    pub ungrounded: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlmOutcome {
    pub unaligned_runs: BTreeMap<String, usize>,
    pub candidates: usize,
    /// `(video_id, triplet)` in selection order.
    pub negatives: Vec<(String, Triplet)>,
}

/// One line of the run trace: everything recorded about one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTrace {
    pub video_id: String,
    pub frame_count: u32,
    pub sentences: usize,
    pub raw_sentences: usize,
    pub passthrough: bool,
    pub segmentation_usage: TokenUsage,
    pub parse_usage: TokenUsage,
    pub estimated_cost: f64,
    pub triplets_extracted: usize,
    pub unparseable_sentences: usize,
    pub mapping: MappingStats,
    pub ground: GroundCounts,
    pub unaligned_runs: usize,
    pub negatives: usize,
    pub alignment: AlignmentTrace,
}

impl VideoTrace {
    pub fn usage(&self) -> TokenUsage {
        self.segmentation_usage + self.parse_usage
    }
}

/// Per-stage counts of a run; equal across reruns of the same config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunCounts {
    pub videos: usize,
    pub sentences: usize,
    pub passthrough_captions: usize,
    /// Sentences merged away by the frame-count cap.
    pub capped_sentences: usize,
    pub aligned_sentences: usize,
    pub triplets_extracted: usize,
    pub triplets_mapped: usize,
    pub triplets_discarded: usize,
    pub unparseable_sentences: usize,
    pub grounded_triplets: usize,
    pub unaligned_runs: usize,
    pub candidates: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub counts: RunCounts,
    pub mapping: MappingStats,
    pub ground: GroundCounts,
    pub usage: TokenUsage,
    pub estimated_cost: f64,
    pub network_requests: usize,
    pub wall_time_secs: f64,
    pub outputs: Vec<PathBuf>,
}

/// What a single-stage invocation wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub records: usize,
    pub outputs: Vec<PathBuf>,
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let paths: Vec<String> = self.outputs.iter().map(|p| p.display().to_string()).collect();
        write!(f, "{}: {} records -> {}", self.stage, self.records, paths.join(", "))
    }
}

// ---------------------------------------------------------------------------
// output staging

/// Files written under temporary names and renamed into place together.
struct Staged {
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn temp_for(path: &Path) -> PathBuf {
        let mut name = path.file_name().expect("output has a file name").to_os_string();
        name.push(".partial");
        path.with_file_name(name)
    }

    fn write(&mut self, path: PathBuf, write: impl FnOnce(&Path) -> Result<(), BoxError>) -> Result<(), PipelineError> {
        let tmp = Self::temp_for(&path);
        self.files.push((tmp.clone(), path));
        write(&tmp).map_err(|e| PipelineError::new(Stage::Write, e))
    }

    fn ndjson<T: Serialize>(&mut self, path: PathBuf, records: &[T]) -> Result<(), PipelineError> {
        self.write(path, |p| write_ndjson(p, records).map_err(Into::into))
    }

    fn commit(mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let files = std::mem::take(&mut self.files);
        let mut done = Vec::new();
        for (tmp, path) in &files {
            if let Err(e) = fs::rename(tmp, path) {
                for p in &done {
                    let _ = fs::remove_file(p);
                }
                self.files = files.clone();
                return Err(PipelineError::new(
                    Stage::Write,
                    format!("cannot move {} into place: {e}", path.display()),
                ));
            }
            done.push(path.clone());
        }
        Ok(done)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.files {
            let _ = fs::remove_file(tmp);
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)
        .map_err(|e| PipelineError::new(Stage::Write, format!("cannot create {}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// pipeline

pub struct Pipeline {
    config: PipelineConfig,
    vocab: Vocabulary,
    client: Option<LlmClient>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("client", &self.client)
            .finish()
    }
}

impl Pipeline {
    /// Validates `config` and builds the client it asks for.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let client = config.needs_llm().then(|| default_client(&config));
        Self::with_client(config, client)
    }

    /// Like [`Pipeline::new`] with a caller-supplied client.
    pub fn with_client(config: PipelineConfig, client: Option<LlmClient>) -> Result<Self, PipelineError> {
        config.validate()?;
        let vocab = config.vocabulary()?;
        if !config.skip_plm {
            let (a, b) = &config.plm.negative_class_names;
            if let Some(missing) = [a, b].into_iter().find(|c| !vocab.has_action(c)) {
                return Err(PipelineError::validation(
                    Stage::Config,
                    format!(
                        "negative class {missing:?} is not in the vocabulary; set skip_plm to run without negatives"
                    ),
                ));
            }
        }
        if config.needs_llm() && client.is_none() {
            return Err(PipelineError::validation(Stage::Config, "config needs an LLM client"));
        }
        Ok(Self { config, vocab, client })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn client(&self) -> Option<&LlmClient> {
        self.client.as_ref()
    }

    fn exec(&self) -> Execution {
        self.config.execution
    }

    pub fn load_bundle(&self) -> Result<DatasetBundle, PipelineError> {
        load_bundle_with(&self.config.paths.data_root, &self.config.ingest, self.exec())
            .map_err(|e| PipelineError::ingest(Stage::Ingest, e))
    }

    /// Segments every caption and caps each video at `max(1, T - 1)`
    /// sentences.
    pub fn segment(&self, manifests: &[VideoManifest]) -> Result<BTreeMap<String, VideoSegments>, PipelineError> {
        let results = self.exec().try_map(manifests, |m| {
            let seg = segment_caption(&m.caption, &self.config.tcs, self.client())
                .map_err(|e| PipelineError::new(Stage::Segment, format!("{}: {e}", m.video_id)))?;
            let raw_count = seg.sentences.len();
            Ok::<_, PipelineError>(VideoSegments {
                sentences: cap_sentences(seg.sentences, m.frame_count()),
                raw_count,
                usage: seg.usage,
                passthrough: seg.passthrough,
            })
        })?;
        Ok(manifests.iter().map(|m| m.video_id.clone()).zip(results).collect())
    }

    /// Aligns each video's sentences with frame intervals. Sentence
    /// embeddings are read from the data root.
    pub fn align(
        &self,
        bundle: &DatasetBundle,
        sentences: &BTreeMap<String, Vec<SegmentedSentence>>,
    ) -> Result<BTreeMap<String, (Vec<SegmentedSentence>, AlignmentTrace)>, PipelineError> {
        let adv = self.config.adv_config();
        let root = &self.config.paths.data_root;
        let videos: Vec<(&String, &Vec<SegmentedSentence>)> = sentences.iter().collect();
        let results = self.exec().try_map(&videos, |(vid, sents)| {
            let frames = bundle.embeddings.get(*vid).ok_or_else(|| {
                PipelineError::validation(Stage::Align, format!("{vid} is not in the dataset manifest"))
            })?;
            let s_emb = load_sentence_embeddings(root, vid, sents.len(), frames.dim())
                .map_err(|e| PipelineError::ingest(Stage::Align, e))?;
            align_video(vid, sents, &s_emb, frames, &adv)
                .map_err(|e| PipelineError::new(Stage::Align, format!("{vid}: {e}")))
        })?;
        Ok(videos.iter().map(|(v, _)| (*v).clone()).zip(results).collect())
    }

    /// Parses every sentence and maps the triplets onto the vocabulary.
    ///
    /// Parsing runs per video with the configured execution. Mapping runs
    /// in video order so that memoized LLM lookups are charged to the
    /// first video that needs them.
    pub fn parse(
        &self,
        sentences: &BTreeMap<String, Vec<SegmentedSentence>>,
    ) -> Result<BTreeMap<String, VideoParse>, PipelineError> {
        let cfg = &self.config.parse;
        let videos: Vec<(&String, &Vec<SegmentedSentence>)> = sentences.iter().collect();
        let parsed = self.exec().try_map(&videos, |(vid, sents)| {
            sents
                .iter()
                .map(|s| {
                    parse_triplets(s, cfg, self.client())
                        .map(|o| (s.order_index, o))
                        .map_err(|e| PipelineError::new(Stage::Parse, format!("{vid}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()
        })?;

        let mapper = ClassMapper::new(cfg, &self.vocab, self.client())
            .map_err(|e| PipelineError::validation(Stage::Parse, e))?;
        let mut out = BTreeMap::new();
        for ((vid, _), outcomes) in videos.iter().zip(parsed) {
            let before = mapper.usage();
            let mut v = VideoParse::default();
            for (order, o) in outcomes {
                v.extracted += o.triplets.len();
                v.unparseable_sentences += usize::from(o.unparseable);
                v.usage += o.usage;
                let (mapped, stats) = mapper
                    .map_all(&o.triplets)
                    .map_err(|e| PipelineError::new(Stage::Parse, format!("{vid}: {e}")))?;
                v.mapping.merge(&stats);
                v.triplets.extend(mapped.into_iter().map(|t| (order, t)));
            }
            let after = mapper.usage();
            v.usage += TokenUsage::new(
                after.input_tokens - before.input_tokens,
                after.output_tokens - before.output_tokens,
            );
            out.insert((*vid).clone(), v);
        }

        if let (MappingMode::None, Some(n)) = (cfg.mapping, cfg.top_n_open_classes) {
            let keep: BTreeSet<String> =
                top_predicates(out.values().flat_map(|v| v.triplets.iter().map(|(_, t)| t)), n)
                    .into_iter()
                    .collect();
            for v in out.values_mut() {
                let before = v.triplets.len();
                v.triplets.retain(|(_, t)| keep.contains(&t.predicate_class));
                let dropped = before - v.triplets.len();
                v.mapping.kept -= dropped;
                v.mapping.outside_top_n += dropped;
            }
        }
        Ok(out)
    }

    /// Localizes mapped triplets within their sentence's interval. A triplet
    /// repeated within one sentence is grounded once.
    pub fn ground(
        &self,
        bundle: &DatasetBundle,
        sentences: &BTreeMap<String, Vec<SegmentedSentence>>,
        parsed: &BTreeMap<String, Vec<(u32, Triplet)>>,
    ) -> (BTreeMap<String, SceneGraph>, BTreeMap<String, GroundCounts>) {
        let mut graphs = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (vid, sents) in sentences {
            let dets = bundle.detections_for(vid);
            let mut graph = SceneGraph::new(vid.clone());
            let mut c = GroundCounts::default();
            let triplets = parsed.get(vid).map(Vec::as_slice).unwrap_or(&[]);
            for s in sents {
                let mut own: Vec<Triplet> = Vec::new();
                for (_, t) in triplets.iter().filter(|(o, _)| *o == s.order_index) {
                    if !own.iter().any(|u| u.class_key() == t.class_key()) {
                        own.push(t.clone());
                    }
                }
                let Some(interval) = s.aligned_frames else {
                    c.unaligned_sentence += own.len();
                    continue;
                };
                let grounded = ground_triplets(&own, interval, dets);
                c.ungrounded += own
                    .iter()
                    .filter(|t| !grounded.iter().any(|g| g.class_key() == t.class_key()))
                    .count();
                c.grounded += grounded.len();
                for g in grounded {
                    graph.insert(g);
                }
            }
            graphs.insert(vid.clone(), graph);
            counts.insert(vid.clone(), c);
        }
        (graphs, counts)
    }

    /// Negative pseudo-labels from the motion of person-object pairs over
    /// unaligned frames, selected over the whole dataset.
    pub fn label_negatives(
        &self,
        bundle: &DatasetBundle,
        sentences: &BTreeMap<String, Vec<SegmentedSentence>>,
        graphs: &BTreeMap<String, SceneGraph>,
    ) -> Result<PlmOutcome, PipelineError> {
        let mut runs = BTreeMap::new();
        for m in &bundle.manifests {
            let sents = sentences.get(&m.video_id).map(Vec::as_slice).unwrap_or(&[]);
            runs.insert(m.video_id.clone(), collect_unaligned_runs(m.frame_count(), sents));
        }
        let candidates = build_all_candidates(&bundle.detections, graphs, &runs, self.exec());
        let negatives =
            assign_negatives(&candidates, &self.config.plm).map_err(|e| PipelineError::validation(Stage::Plm, e))?;
        Ok(PlmOutcome {
            unaligned_runs: runs.into_iter().map(|(v, r)| (v, r.len())).collect(),
            candidates: candidates.len(),
            negatives,
        })
    }

    /// Runs every stage and writes the outputs listed in
    /// [`DETERMINISTIC_OUTPUTS`] plus the run report. On error nothing is
    /// left behind in the output directory.
    pub fn run_all(&self) -> Result<RunReport, PipelineError> {
        let started = Instant::now();
        let requests_before = self.client().map_or(0, LlmClient::network_requests);
        let bundle = self.load_bundle()?;

        let segments = self.segment(&bundle.manifests)?;
        let to_align: BTreeMap<String, Vec<SegmentedSentence>> =
            segments.iter().map(|(v, s)| (v.clone(), s.sentences.clone())).collect();
        let aligned = self.align(&bundle, &to_align)?;
        let sentences: BTreeMap<String, Vec<SegmentedSentence>> =
            aligned.iter().map(|(v, (s, _))| (v.clone(), s.clone())).collect();

        let parsed = self.parse(&sentences)?;
        let mapped: BTreeMap<String, Vec<(u32, Triplet)>> =
            parsed.iter().map(|(v, p)| (v.clone(), p.triplets.clone())).collect();
        let (mut graphs, ground_counts) = self.ground(&bundle, &sentences, &mapped);

        let plm = if self.config.skip_plm {
            PlmOutcome::default()
        } else {
            self.label_negatives(&bundle, &sentences, &graphs)?
        };
        let mut negatives_per_video: BTreeMap<&str, usize> = BTreeMap::new();
        for (vid, t) in &plm.negatives {
            *negatives_per_video.entry(vid.as_str()).or_default() += 1;
            graphs
                .entry(vid.clone())
                .or_insert_with(|| SceneGraph::new(vid.clone()))
                .insert(t.clone());
        }

        let pricing = self.config.tcs.pricing;
        let mut traces = Vec::new();
        let mut counts = RunCounts {
            videos: bundle.manifests.len(),
            candidates: plm.candidates,
            negatives: plm.negatives.len(),
            ..RunCounts::default()
        };
        let mut mapping = MappingStats::default();
        let mut ground = GroundCounts::default();
        let mut usage = TokenUsage::default();
        for m in &bundle.manifests {
            let vid = &m.video_id;
            let seg = &segments[vid];
            let (sents, alignment) = &aligned[vid];
            let p = &parsed[vid];
            let g = ground_counts[vid];
            let runs = plm.unaligned_runs.get(vid).copied().unwrap_or(0);
            let video_usage = seg.usage + p.usage;

            counts.sentences += sents.len();
            counts.passthrough_captions += usize::from(seg.passthrough);
            counts.capped_sentences += seg.raw_count - sents.len();
            counts.aligned_sentences += sents.iter().filter(|s| s.aligned_frames.is_some()).count();
            counts.triplets_extracted += p.extracted;
            counts.unparseable_sentences += p.unparseable_sentences;
            counts.grounded_triplets += g.grounded;
            counts.unaligned_runs += runs;
            mapping.merge(&p.mapping);
            ground.grounded += g.grounded;
            ground.unaligned_sentence += g.unaligned_sentence;
            ground.ungrounded += g.ungrounded;
            usage += video_usage;

            traces.push(VideoTrace {
                video_id: vid.clone(),
                frame_count: m.frame_count(),
                sentences: sents.len(),
                raw_sentences: seg.raw_count,
                passthrough: seg.passthrough,
                segmentation_usage: seg.usage,
                parse_usage: p.usage,
                estimated_cost: video_usage.estimated_cost(&pricing),
                triplets_extracted: p.extracted,
                unparseable_sentences: p.unparseable_sentences,
                mapping: p.mapping,
                ground: g,
                unaligned_runs: runs,
                negatives: negatives_per_video.get(vid.as_str()).copied().unwrap_or(0),
                alignment: alignment.clone(),
            });
        }
        counts.triplets_mapped = mapping.kept;
        counts.triplets_discarded = mapping.discarded();

        let out_dir = &self.config.paths.output_dir;
        create_dir(out_dir)?;
        let parsed_records = parsed_records(&mapped);
        let graph_list: Vec<SceneGraph> = graphs.into_values().collect();
        let mut staged = Staged::new();
        staged.write(self.config.output_path(SEGMENTS_FILE), |p| {
            write_sentences(p, &sentences).map_err(Into::into)
        })?;
        staged.ndjson(self.config.output_path(PARSED_FILE), &parsed_records)?;
        staged.ndjson(self.config.output_path(PSEUDO_LABELS_FILE), &graph_records(&graph_list))?;
        staged.ndjson(self.config.output_path(TRACE_FILE), &traces)?;

        let mut report = RunReport {
            counts,
            mapping,
            ground,
            usage,
            estimated_cost: usage.estimated_cost(&pricing),
            network_requests: self.client().map_or(0, LlmClient::network_requests) - requests_before,
            wall_time_secs: 0.0,
            outputs: DETERMINISTIC_OUTPUTS
                .iter()
                .map(|f| self.config.output_path(f))
                .collect(),
        };
        report.outputs.push(self.config.output_path(REPORT_FILE));
        report.wall_time_secs = started.elapsed().as_secs_f64();
        staged.write(self.config.output_path(REPORT_FILE), |p| {
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(p, json + "\n").map_err(Into::into)
        })?;
        staged.commit()?;
        log::info!(
            "run complete: {} videos, {} sentences, {} grounded, {} negatives",
            report.counts.videos,
            report.counts.sentences,
            report.counts.grounded_triplets,
            report.counts.negatives
        );
        Ok(report)
    }

    // -----------------------------------------------------------------------
    // single stages over files in the output directory

    fn read_manifests(&self) -> Result<Vec<VideoManifest>, PipelineError> {
        read_manifests(&manifest_path(&self.config.paths.data_root))
            .map_err(|e| PipelineError::ingest(Stage::Ingest, e))
    }

    fn read_segments(&self, stage: Stage) -> Result<BTreeMap<String, Vec<SegmentedSentence>>, PipelineError> {
        read_sentences(&self.config.output_path(SEGMENTS_FILE)).map_err(|e| PipelineError::ingest(stage, e))
    }

    fn write_one<T: Serialize>(&self, stage: Stage, file: &Path, records: &[T]) -> Result<StageSummary, PipelineError> {
        create_dir(&self.config.paths.output_dir)?;
        let mut staged = Staged::new();
        staged.ndjson(file.to_path_buf(), records)?;
        Ok(StageSummary {
            stage,
            records: records.len(),
            outputs: staged.commit()?,
        })
    }

    /// Writes unaligned sentences to `segments.ndjson`.
    pub fn segment_stage(&self) -> Result<StageSummary, PipelineError> {
        let manifests = self.read_manifests()?;
        let segments = self.segment(&manifests)?;
        let per_video: BTreeMap<String, Vec<SegmentedSentence>> =
            segments.into_iter().map(|(v, s)| (v, s.sentences)).collect();
        let records = crate::ingest::sentence_records(&per_video);
        self.write_one(Stage::Segment, &self.config.output_path(SEGMENTS_FILE), &records)
    }

    /// Adds intervals to `segments.ndjson` and writes the alignment trace
    /// to `trace_out` or `alignment_trace.ndjson`.
    pub fn align_stage(&self, trace_out: Option<&Path>) -> Result<StageSummary, PipelineError> {
        let segments = self.read_segments(Stage::Align)?;
        let bundle = self.load_bundle()?;
        let aligned = self.align(&bundle, &segments)?;
        let sentences: BTreeMap<String, Vec<SegmentedSentence>> =
            aligned.iter().map(|(v, (s, _))| (v.clone(), s.clone())).collect();
        let traces: Vec<&AlignmentTrace> = aligned.values().map(|(_, t)| t).collect();
        create_dir(&self.config.paths.output_dir)?;
        let trace_path = trace_out.map_or_else(|| self.config.output_path(ALIGNMENT_TRACE_FILE), Path::to_path_buf);
        let mut staged = Staged::new();
        staged.write(self.config.output_path(SEGMENTS_FILE), |p| {
            write_sentences(p, &sentences).map_err(Into::into)
        })?;
        staged.ndjson(trace_path, &traces)?;
        Ok(StageSummary {
            stage: Stage::Align,
            records: sentences.values().map(Vec::len).sum(),
            outputs: staged.commit()?,
        })
    }

    /// Writes mapped triplets to `parsed.ndjson`.
    pub fn parse_stage(&self) -> Result<StageSummary, PipelineError> {
        let segments = self.read_segments(Stage::Parse)?;
        let parsed = self.parse(&segments)?;
        let mapped: BTreeMap<String, Vec<(u32, Triplet)>> = parsed.into_iter().map(|(v, p)| (v, p.triplets)).collect();
        self.write_one(
            Stage::Parse,
            &self.config.output_path(PARSED_FILE),
            &parsed_records(&mapped),
        )
    }

    /// Writes caption pseudo-labels to `pseudo_labels.ndjson`.
    pub fn ground_stage(&self) -> Result<StageSummary, PipelineError> {
        let segments = self.read_segments(Stage::Ground)?;
        let parsed_path = self.config.output_path(PARSED_FILE);
        let mut mapped: BTreeMap<String, Vec<(u32, Triplet)>> = BTreeMap::new();
        for (_, r) in read_ndjson::<ParsedRecord>(&parsed_path).map_err(|e| PipelineError::ingest(Stage::Ground, e))? {
            let t = Triplet::unlocalized(r.subject_class, r.predicate_class, r.object_class, Provenance::Caption);
            mapped.entry(r.video_id).or_default().push((r.order_index, t));
        }
        let bundle = self.load_bundle()?;
        let (graphs, _) = self.ground(&bundle, &segments, &mapped);
        let graph_list: Vec<SceneGraph> = graphs.into_values().collect();
        self.write_one(
            Stage::Ground,
            &self.config.output_path(PSEUDO_LABELS_FILE),
            &graph_records(&graph_list),
        )
    }

    /// Replaces the negatives in `pseudo_labels.ndjson` with a fresh
    /// selection over its caption labels.
    pub fn plm_stage(&self) -> Result<StageSummary, PipelineError> {
        let segments = self.read_segments(Stage::Plm)?;
        let labels_path = self.config.output_path(PSEUDO_LABELS_FILE);
        let records = read_triplet_records(&labels_path).map_err(|e| PipelineError::ingest(Stage::Plm, e))?;
        let captions: Vec<_> = records
            .into_iter()
            .filter(|r| r.provenance != Provenance::NegativePseudo)
            .collect();
        let mut graphs: BTreeMap<String, SceneGraph> = records_to_graphs(captions)
            .into_iter()
            .map(|g| (g.video_id.clone(), g))
            .collect();
        let bundle = self.load_bundle()?;
        let plm = self.label_negatives(&bundle, &segments, &graphs)?;
        for (vid, t) in plm.negatives {
            graphs
                .entry(vid.clone())
                .or_insert_with(|| SceneGraph::new(vid))
                .insert(t);
        }
        let graph_list: Vec<SceneGraph> = graphs.into_values().collect();
        self.write_one(Stage::Plm, &labels_path, &graph_records(&graph_list))
    }
}

fn parsed_records(mapped: &BTreeMap<String, Vec<(u32, Triplet)>>) -> Vec<ParsedRecord> {
    mapped
        .iter()
        .flat_map(|(vid, ts)| {
            ts.iter().map(move |(order, t)| ParsedRecord {
                video_id: vid.clone(),
                order_index: *order,
                subject_class: t.subject_class.clone(),
                predicate_class: t.predicate_class.clone(),
                object_class: t.object_class.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// eval and validate

/// Reads scene graphs from one NDJSON file or from every `.ndjson` file of
/// a directory.
pub fn read_graphs(path: &Path) -> Result<Vec<SceneGraph>, IngestError> {
    if !path.is_dir() {
        return read_scene_graphs(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
        .collect();
    files.sort();
    let mut records = Vec::new();
    for f in files {
        records.extend(read_triplet_records(&f)?);
    }
    Ok(records_to_graphs(records))
}

/// Recall@K of scored predictions against ground truth.
pub fn evaluate_files(
    gt: &Path,
    predictions: &Path,
    config: &EvalConfig,
    exec: Execution,
) -> Result<RecallReport, PipelineError> {
    config
        .validate()
        .map_err(|e| PipelineError::validation(Stage::Config, e))?;
    let gt = read_graphs(gt).map_err(|e| PipelineError::ingest(Stage::Eval, e))?;
    let preds = read_graphs(predictions).map_err(|e| PipelineError::ingest(Stage::Eval, e))?;
    let instances = instances_from_graphs(&gt, &preds);
    recall_at_k_with(&instances, config, exec).map_err(|e| PipelineError::validation(Stage::Eval, e))
}

/// Checks every video of a dataset root without stopping at the first
/// problem. Videos whose files cannot be read are an error.
pub fn validate_root(root: &Path) -> Result<Vec<ValidationReport>, PipelineError> {
    let manifests = read_manifests(&manifest_path(root)).map_err(|e| PipelineError::ingest(Stage::Ingest, e))?;
    let mut reports = Vec::new();
    for m in &manifests {
        let emb = read_embeddings(&frame_embeddings_path(root, &m.video_id))
            .map_err(|e| PipelineError::ingest(Stage::Ingest, e))?;
        let dets: Vec<_> = read_raw_detections(&detections_path(root, &m.video_id))
            .map_err(|e| PipelineError::ingest(Stage::Ingest, e))?
            .into_iter()
            .map(|(_, d)| d)
            .collect();
        reports.push(validate_manifest(m, &emb, &dets));
    }
    Ok(reports)
}
