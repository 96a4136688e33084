//! Command-line driver: argument parsing and command dispatch.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use firstprune::analysis::{run_perturb_dataset, run_probe_dataset, run_similarity_dataset, AnalysisSummary};
use firstprune::answer::{load_questions, Question};
use firstprune::backend::EmbeddingClient;
use firstprune::config::{dataset_hash, BackendKind, Backends, RunConfig};
use firstprune::engine::{run_baseline_dataset, run_pipeline, DatasetSummary, ErrorLine, Phase, RunSettings, TraceRecord};
use firstprune::report::{compute_report, write_report, ReportFormat, ReportInputs};
use firstprune::segment::{keyword_frequencies, DEFAULT_MARKERS};
use firstprune::store::{RecordFile, RunStore};

#[derive(Debug, Parser)]
#[command(name = "firstprune", version, about = "Prune sampled reasoning traces by first-step reward")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Questions, one JSON object per line.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Candidates sampled per question.
    #[arg(long = "n", global = true)]
    pub n: Option<usize>,
    /// Candidates kept after scoring.
    #[arg(long = "m", global = true)]
    pub m: Option<usize>,
    /// Token cap of a sampled first step.
    #[arg(long, global = true)]
    pub first_step_len: Option<u32>,
    /// `sim` or `http`.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Run directory; defaults to runs/<run id>.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Base sampling seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Questions processed in parallel.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Continue the run already in the output directory (default).
    #[arg(long, global = true, conflicts_with = "no_resume")]
    pub resume: bool,
    /// Move the existing run aside and start over.
    #[arg(long, global = true)]
    pub no_resume: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample N first steps per question.
    Sample,
    /// Sample if needed, then score every first step.
    Score,
    /// Sample and score if needed, then keep the top M.
    Prune,
    /// Run remaining phases through continuation of the kept steps.
    Continue,
    /// Sample, score, prune and continue in one go.
    Pipeline,
    /// Plain sampling of N full traces per question.
    Baseline,
    /// Conclusions forced from the first step of each baseline trace.
    ProbeFirstStep,
    /// Step-to-conclusion similarity curves of baseline traces.
    Similarity,
    /// Continuations from perturbed first steps.
    Perturb,
    /// Per-trace keyword frequencies over the run's traces.
    KeywordFreq(KeywordArgs),
    /// Tables and plot data from a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct KeywordArgs {
    /// Markers to count; defaults to the built-in marker list.
    #[arg(long, value_delimiter = ',')]
    pub markers: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Any of md, csv, json.
    #[arg(long, value_delimiter = ',', default_value = "md,csv,json")]
    pub format: Vec<ReportFormat>,
    /// Where report files go; defaults to `<out-dir>/report`.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

/// A failed command, ready for the machine-readable error line.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub error: anyhow::Error,
    pub exit_code: i32,
}

impl Failure {
    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind, "message": format!("{:#}", self.error) } })
    }
}

fn kind_of(e: &anyhow::Error) -> String {
    use firstprune::{
        analysis::AnalysisError, answer::DomainError, config::ConfigError, engine::EngineError, report::ReportError,
        store::StoreError,
    };
    if let Some(e) = e.downcast_ref::<firstprune::Error>() {
        return e.kind().into();
    }
    let kind = if e.is::<ConfigError>() {
        "config"
    } else if e.is::<DomainError>() {
        "domain"
    } else if e.is::<StoreError>() {
        "store"
    } else if e.is::<EngineError>() {
        "engine"
    } else if e.is::<AnalysisError>() {
        "analysis"
    } else if e.is::<ReportError>() {
        "report"
    } else {
        "usage"
    };
    kind.into()
}

pub struct RunContext {
    pub config: RunConfig,
    pub questions: Vec<Question>,
    pub dataset_hash: String,
    pub out_dir: PathBuf,
}

/// Merges the config file, environment and flags, and loads the dataset.
pub fn resolve(common: &Common, needs_dataset: bool) -> anyhow::Result<RunContext> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_env();
    if let Some(n) = common.n {
        config.experiment.n_candidates = n;
    }
    if let Some(m) = common.m {
        config.experiment.keep_m = m;
    }
    if let Some(l) = common.first_step_len {
        config.experiment.first_step_len = l;
    }
    if let Some(b) = common.backend {
        config.backend = b;
    }
    if let Some(s) = common.seed {
        config.experiment.decoding.seed = s;
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    if let Some(d) = &common.out_dir {
        config.out_dir = Some(d.clone());
    }
    config.validate()?;
    let (questions, dataset_hash) = match &common.dataset {
        Some(p) => {
            let body = std::fs::read(p).with_context(|| format!("reading dataset {}", p.display()))?;
            (load_questions(p)?, dataset_hash(&body))
        }
        None if needs_dataset => bail!("--dataset is required for this command"),
        None => (Vec::new(), String::new()),
    };
    let out_dir = match &config.out_dir {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(config.run_id(&dataset_hash)),
    };
    Ok(RunContext {
        config,
        questions,
        dataset_hash,
        out_dir,
    })
}

fn open_store(ctx: &RunContext, common: &Common, backends: &Backends) -> anyhow::Result<RunStore> {
    let store = RunStore::create(&ctx.out_dir, ctx.config.manifest(&ctx.dataset_hash), !common.no_resume)?;
    store.record_backend("generator", &backend_id(&ctx.config, "generator"))?;
    if backends.scorer.is_some() {
        store.record_backend("reward", &backend_id(&ctx.config, "reward"))?;
    }
    store.record_backend("prm_prompt", "raw question prompt, no chat template")?;
    Ok(store)
}

fn backend_id(c: &RunConfig, role: &str) -> String {
    match c.backend {
        BackendKind::Sim => format!("sim/{role}/{:?}", c.simulation.scorer).to_lowercase(),
        BackendKind::Http => {
            let ep = match role {
                "reward" => &c.reward,
                "embedding" => &c.embedding,
                _ => &c.generator.endpoint,
            };
            format!(
                "{} {}",
                ep.url.as_deref().unwrap_or("-"),
                ep.model.as_deref().unwrap_or("-")
            )
        }
    }
}

fn dataset_json(s: &DatasetSummary) -> Value {
    json!({
        "questions": s.questions,
        "completed": s.completed,
        "failed": s.failures.iter().map(|(q, e)| json!({"question_id": q, "message": e.to_string()})).collect::<Vec<_>>(),
        "token_ratio": s.budget.as_ref().and_then(|b| b.ratio_vs_baseline),
    })
}

fn analysis_json(s: &AnalysisSummary) -> Value {
    json!({
        "processed": s.processed,
        "skipped": s.skipped,
        "failed": s.failures.iter().map(|(q, e)| json!({"question_id": q, "message": e})).collect::<Vec<_>>(),
    })
}

/// What a successful command prints, plus whether any question failed.
pub struct Outcome {
    pub summary: Value,
    pub partial: bool,
}

fn pipeline(ctx: &RunContext, common: &Common, stop_after: Phase) -> anyhow::Result<Outcome> {
    let backends = ctx.config.build_backends(&ctx.questions)?;
    let scorer = backends.scorer()?.clone();
    let store = open_store(ctx, common, &backends)?;
    let settings = RunSettings {
        workers: ctx.config.workers,
        stop_after,
    };
    let s = run_pipeline(
        backends.generator.as_ref(),
        scorer.as_ref(),
        &ctx.questions,
        &ctx.config.experiment,
        &store,
        settings,
    )?;
    if stop_after == Phase::Continue {
        store.finish()?;
    }
    Ok(Outcome {
        summary: with_dir(dataset_json(&s), &store),
        partial: !s.failures.is_empty(),
    })
}

fn with_dir(mut v: Value, store: &RunStore) -> Value {
    v["run_id"] = json!(store.run_id());
    v["out_dir"] = json!(store.dir().display().to_string());
    v
}

fn analysis(ctx: &RunContext, common: &Common, which: &Command) -> anyhow::Result<Outcome> {
    let backends = ctx.config.build_backends(&ctx.questions)?;
    let store = open_store(ctx, common, &backends)?;
    let profile = ctx.config.segmentation.profile()?;
    let params = ctx.config.experiment.decoding;
    let workers = ctx.config.workers;
    let s = match which {
        Command::ProbeFirstStep => {
            run_probe_dataset(backends.generator.as_ref(), &ctx.questions, &store, &profile, &params, workers)?
        }
        Command::Similarity => {
            let embedder = EmbeddingClient::new(backends.embedder()?.clone());
            let close = backends.generator.think_close().to_string();
            run_similarity_dataset(&ctx.questions, &store, &profile, &embedder, &close, workers)?
        }
        Command::Perturb => run_perturb_dataset(
            backends.generator.as_ref(),
            &ctx.questions,
            &store,
            &ctx.config.analysis.perturb,
            &params,
            workers,
        )?,
        _ => unreachable!("not an analysis command"),
    };
    Ok(Outcome {
        summary: with_dir(analysis_json(&s), &store),
        partial: !s.failures.is_empty(),
    })
}

fn keyword_freq(ctx: &RunContext, args: &KeywordArgs) -> anyhow::Result<Outcome> {
    let store = RunStore::open_existing(&ctx.out_dir)?;
    let mut traces: Vec<TraceRecord> = store.load(RecordFile::Baseline)?;
    traces.extend(store.load::<TraceRecord>(RecordFile::Records)?);
    let markers: Vec<String> = if args.markers.is_empty() {
        DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect()
    } else {
        args.markers.clone()
    };
    let texts: Vec<String> = traces.iter().map(TraceRecord::full_text).collect();
    let freqs = keyword_frequencies(texts.iter().map(String::as_str), &markers);
    Ok(Outcome {
        summary: json!({
            "traces": texts.len(),
            "per_trace_frequency": freqs.into_iter().map(|(k, v)| json!({"marker": k, "mean_count": v})).collect::<Vec<_>>(),
        }),
        partial: false,
    })
}

fn report(ctx: &RunContext, args: &ReportArgs) -> anyhow::Result<Outcome> {
    let store = RunStore::open_existing(&ctx.out_dir)?;
    let inputs = ReportInputs::load(&store)?;
    let questions = (!ctx.questions.is_empty()).then_some(ctx.questions.as_slice());
    let data = compute_report(&inputs, questions, &ctx.config.report)?;
    let dir = args.report_dir.clone().unwrap_or_else(|| store.dir().join("report"));
    let files = write_report(&data, &args.format, &dir)?;
    Ok(Outcome {
        summary: json!({
            "run_id": data.run_id,
            "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
            "token_ratio": data.token_ratio,
            "pruned_accuracy": data.average.pruned,
            "plain_n_accuracy": data.average.plain_n,
            "marker": data.marker,
        }),
        partial: false,
    })
}

fn dispatch(cli: &Cli, ctx: &RunContext) -> anyhow::Result<Outcome> {
    let common = &cli.common;
    match &cli.command {
        Command::Sample => pipeline(ctx, common, Phase::Sample),
        Command::Score => pipeline(ctx, common, Phase::Score),
        Command::Prune => pipeline(ctx, common, Phase::Select),
        Command::Continue | Command::Pipeline => pipeline(ctx, common, Phase::Continue),
        Command::Baseline => {
            let backends = ctx.config.build_backends(&ctx.questions)?;
            let store = open_store(ctx, common, &backends)?;
            let s = run_baseline_dataset(
                backends.generator.as_ref(),
                &ctx.questions,
                &ctx.config.experiment,
                &store,
                ctx.config.workers,
            )?;
            Ok(Outcome {
                summary: with_dir(dataset_json(&s), &store),
                partial: !s.failures.is_empty(),
            })
        }
        c @ (Command::ProbeFirstStep | Command::Similarity | Command::Perturb) => analysis(ctx, common, c),
        Command::KeywordFreq(a) => keyword_freq(ctx, a),
        Command::Report(a) => report(ctx, a),
    }
}

fn needs_dataset(c: &Command) -> bool {
    !matches!(c, Command::KeywordFreq(_) | Command::Report(_))
}

/// Exit code when some questions failed but the run itself completed.
pub const EXIT_PARTIAL: i32 = 3;

/// Runs one command. On failure the error is also appended to the run's
/// `errors.jsonl` when a run directory is known.
pub fn run(cli: &Cli) -> Result<Outcome, Failure> {
    let ctx = match resolve(&cli.common, needs_dataset(&cli.command)) {
        Ok(c) => c,
        Err(error) => {
            return Err(Failure {
                kind: kind_of(&error),
                error,
                exit_code: 2,
            })
        }
    };
    dispatch(cli, &ctx).map_err(|error| {
        let kind = kind_of(&error);
        record_error(&ctx.out_dir, &kind, &error);
        Failure {
            kind,
            error,
            exit_code: 1,
        }
    })
}

fn record_error(dir: &Path, kind: &str, error: &anyhow::Error) {
    let Ok(store) = RunStore::open_existing(dir) else { return };
    let line = ErrorLine {
        question_id: None,
        phase: None,
        kind: kind.to_string(),
        message: format!("{error:#}"),
    };
    if let Err(e) = store.append(RecordFile::Errors, &line) {
        tracing::warn!(error = %e, "could not record error");
    }
}
