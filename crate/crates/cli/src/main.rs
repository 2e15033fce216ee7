//! `vsg`: runs the caption-to-pseudo-label pipeline, one stage at a time or
//! end to end, and evaluates scene-graph predictions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use vsg_core::adv::{ClusteringMethod, SelectionMode};
use vsg_core::eval::{pseudo_label_quality, Regime};
use vsg_core::pipeline::{evaluate_files, read_graphs, validate_root, Pipeline, PipelineConfig, PipelineError};
use vsg_core::plm::FrameStrategy;
use vsg_core::sgparse::{MappingMode, ParserKind};
use vsg_core::stats::stats;
use vsg_core::tcs::TcsMode;

#[derive(Debug, Parser)]
#[command(name = "vsg", version, about = "Weakly supervised video scene-graph pseudo-labeling")]
struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the effective config as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Default, Args)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-video stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Forbid network access; every LLM call must replay a cassette.
    #[arg(long, global = true)]
    offline: bool,
    /// Chat model for segmentation and parsing.
    #[arg(long, global = true)]
    model: Option<String>,
    /// llm | rule_fallback
    #[arg(long, global = true)]
    tcs_mode: Option<TcsMode>,
    /// Frames per cluster.
    #[arg(long, global = true)]
    beta: Option<u32>,
    /// steepest | gap:<tau>
    #[arg(long, global = true)]
    selection: Option<SelectionMode>,
    /// kmeans | agglomerative | gmm
    #[arg(long, global = true)]
    clustering: Option<ClusteringMethod>,
    /// llm | rule
    #[arg(long, global = true)]
    parser: Option<ParserKind>,
    /// llm | lexicon | none
    #[arg(long, global = true)]
    mapping: Option<MappingMode>,
    /// Open vocabulary only: keep the N most frequent predicates.
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// Percentage of negative candidates to label.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// start | end | start_and_end
    #[arg(long, global = true)]
    not_looking: Option<FrameStrategy>,
    /// start | end | start_and_end
    #[arg(long, global = true)]
    not_contacting: Option<FrameStrategy>,
    /// Do not generate negative pseudo-labels.
    #[arg(long, global = true)]
    skip_plm: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split captions into temporally ordered sentences.
    Segment,
    /// Assign each sentence a frame interval.
    Align {
        /// Also write the per-sentence alignment trace here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Extract and map triplets from the segmented sentences.
    Parse,
    /// Ground parsed triplets to detections.
    Ground,
    /// Add negative pseudo-labels to the grounded output.
    Plm,
    /// Recall@K of predictions against ground truth.
    Eval(EvalArgs),
    /// Every stage in order; writes all outputs or none.
    RunAll,
    /// Token usage, cost and alignment histograms from run traces.
    Stats {
        traces: Vec<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Check the dataset under the data root.
    Validate,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth NDJSON file or directory.
    #[arg(long)]
    gt: PathBuf,
    /// Prediction NDJSON file or directory.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// with | no | both
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    iou: Option<f64>,
    /// JSON report path; defaults to eval_report.json in the output dir.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-predicate precision and recall of unscored pseudo-labels instead
    /// of Recall@K.
    #[arg(long)]
    quality: bool,
}

// A closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

enum Failure {
    Fatal(String),
    Validation(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let msg = error_chain(&e);
        if e.is_validation() {
            Self::Validation(msg)
        } else {
            Self::Fatal(msg)
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        cur = s.source();
    }
    msg
}

fn fatal(e: impl std::fmt::Display) -> Failure {
    Failure::Fatal(e.to_string())
}

impl Overrides {
    fn apply(&self, c: &mut PipelineConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if let Some(v) = &self.data_root {
            c.paths.data_root = v.clone();
        }
        if let Some(v) = &self.out_dir {
            c.paths.output_dir = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            c.paths.cache_dir = v.clone();
        }
        c.offline |= self.offline;
        c.skip_plm |= self.skip_plm;
        if let Some(v) = &self.model {
            c.tcs.model_name = v.clone();
            c.parse.model_name = v.clone();
        }
        if let Some(v) = self.tcs_mode {
            c.tcs.mode = v;
        }
        if let Some(v) = self.beta {
            c.adv.beta = v;
        }
        if let Some(v) = self.selection {
            c.adv.selection = v;
        }
        if let Some(v) = self.clustering {
            c.adv.clustering = v;
        }
        if let Some(v) = self.parser {
            c.parse.parser = v;
        }
        if let Some(v) = self.mapping {
            c.parse.mapping = v;
        }
        if self.top_n.is_some() {
            c.parse.top_n_open_classes = self.top_n;
        }
        if let Some(v) = self.alpha {
            c.plm.alpha_percent = v;
        }
        if let Some(v) = self.not_looking {
            c.plm.strategy_not_looking = v;
        }
        if let Some(v) = self.not_contacting {
            c.plm.strategy_not_contacting = v;
        }
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut config);
    if let Command::Eval(args) = cli.command.as_ref().unwrap_or(&Command::RunAll) {
        if let Some(k) = &args.k {
            config.eval.k_values = k.clone();
        }
        if let Some(r) = args.regime {
            config.eval.regime = r;
        }
        if let Some(t) = args.iou {
            config.eval.iou_threshold = t;
        }
    }
    config.validate()?;
    Ok(config)
}

fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; --threads is ignored");
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fatal(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(fatal)?;
    fs::write(path, text + "\n").map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn eval(config: &PipelineConfig, args: &EvalArgs) -> Result<(), Failure> {
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| config.output_path("eval_report.json"));
    if args.quality {
        let read = |p: &Path| read_graphs(p).map_err(|e| fatal(error_chain(&e)));
        let quality = pseudo_label_quality(&read(&args.gt)?, &read(&args.pred)?, config.eval.iou_threshold);
        outln!("{:<20} {:>7} {:>9} {:>7}", "predicate", "labels", "precision", "recall");
        for (class, q) in &quality {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
            outln!(
                "{:<20} {:>7} {:>9} {:>7}",
                class,
                q.labels,
                pct(q.precision),
                pct(q.recall)
            );
        }
        write_json(&report_path, &quality)?;
    } else {
        let report = evaluate_files(&args.gt, &args.pred, &config.eval, config.execution)?;
        out!("{report}");
        outln!("frames evaluated: {}", report.frames_evaluated);
        write_json(&report_path, &report)?;
    }
    info!("report written to {}", report_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = effective_config(&cli)?;
    if cli.dump_config {
        out!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Validation("no subcommand given; see --help".into()));
    };
    init_threads(config.threads);
    match command {
        Command::Eval(args) => eval(&config, &args),
        Command::Stats { traces, json } => {
            let report = stats(&traces, config.tcs.pricing).map_err(|e| fatal(error_chain(&e)))?;
            if json {
                outln!("{}", serde_json::to_string_pretty(&report).map_err(fatal)?);
            } else {
                out!("{}", report.to_text());
            }
            Ok(())
        }
        Command::Validate => {
            let reports = validate_root(&config.paths.data_root)?;
            let mut issues = 0;
            for r in &reports {
                for m in r.messages() {
                    outln!("{}: {m}", r.video_id);
                    issues += 1;
                }
            }
            outln!("{} videos checked, {issues} issues", reports.len());
            if issues > 0 {
                return Err(Failure::Validation(format!("{issues} validation issues")));
            }
            Ok(())
        }
        stage => {
            let pipeline = Pipeline::new(config)?;
            let summary = match stage {
                Command::Segment => pipeline.segment_stage()?,
                Command::Align { trace_out } => pipeline.align_stage(trace_out.as_deref())?,
                Command::Parse => pipeline.parse_stage()?,
                Command::Ground => pipeline.ground_stage()?,
                Command::Plm => pipeline.plm_stage()?,
                Command::RunAll => {
                    let report = pipeline.run_all()?;
                    outln!("{}", serde_json::to_string_pretty(&report).map_err(fatal)?);
                    return Ok(());
                }
                Command::Eval(_) | Command::Stats { .. } | Command::Validate => unreachable!(),
            };
            outln!("{summary}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Fatal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("invalid: {msg}");
            ExitCode::from(2)
        }
    }
}
