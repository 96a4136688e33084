//! Trace diagnostics: step/conclusion similarity, conclusions forced from the
//! first step alone, and perturbed-first-step trials.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{
    boxed_spans, extract_prediction, integer_occurrences, AnswerKind, DecodingParams, Prediction, Question,
};
use crate::backend::template::split_conclusion;
use crate::backend::{BackendError, EmbeddingClient, Embedder, FinishReason, GenerationRequest, Generator, StopCondition};
use crate::engine::{build_pool, ErrorLine, Phase, TraceRecord};
use crate::segment::{segment_steps, sentence_spans, strip_question_overlap, KeywordProfile, SegmentError};
use crate::store::{ItemSink, RecordFile, RunStore, Sequencer, StoreError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("record has no conclusion")]
    EmptyConclusion,
    #[error("no curves to aggregate")]
    EmptyInput,
    #[error("non-finite similarity value")]
    NonFinite,
    #[error("cosine {0} outside [-1, 1]")]
    CosineOutOfRange(f64),
    #[error("vectors of dimension {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroVector,
    #[error("source conclusion does not state the correct answer")]
    SourceNotCorrect,
    #[error("no answer occurrence left to replace")]
    NoReplacementSites,
    #[error("incorrect variants need an integer answer")]
    UnsupportedKind,
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

const COSINE_SLACK: f64 = 1e-9;

/// Cosine similarity; rounding slack up to 1e-9 beyond ±1 is clamped, anything
/// further is an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    let c = dot / (na * nb);
    if !c.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    if c.abs() > 1.0 + COSINE_SLACK {
        return Err(AnalysisError::CosineOutOfRange(c));
    }
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub question_id: String,
    pub seed: u64,
    pub model_family: String,
    pub values: Vec<f64>,
    pub step_count: usize,
}

/// Think text of a record, without the conclusion.
pub fn think_text<'a>(record_text: &'a str, close: &str) -> &'a str {
    split_conclusion(record_text, close).0
}

/// Similarity of each reasoning step of `record` to its conclusion.
pub fn similarity_curve<E: Embedder>(
    record: &TraceRecord,
    q: &Question,
    profile: &KeywordProfile,
    embedder: &EmbeddingClient<E>,
    close: &str,
) -> Result<SimilarityCurve, AnalysisError> {
    if record.conclusion_text.trim().is_empty() {
        return Err(AnalysisError::EmptyConclusion);
    }
    let full = record.full_text();
    let think = strip_question_overlap(think_text(&full, close), q);
    let seg = segment_steps(think, profile)?;
    let mut texts: Vec<String> = seg.steps.clone();
    texts.push(record.conclusion_text.clone());
    let vectors = embedder.embed_many(&texts)?;
    let (conclusion, steps) = vectors.split_last().expect("at least one vector");
    let values = steps.iter().map(|v| cosine(v, conclusion)).collect::<Result<Vec<_>, _>>()?;
    Ok(SimilarityCurve {
        question_id: record.question_id.clone(),
        seed: record.seed,
        model_family: profile.model_family.clone(),
        step_count: values.len(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    MeanSteps,
    MaxSteps,
}

impl TargetMode {
    pub fn label(self) -> &'static str {
        match self {
            TargetMode::MeanSteps => "mean_steps",
            TargetMode::MaxSteps => "max_steps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCurve {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_curves: usize,
}

/// Linear resampling onto `g` evenly spaced positions over [0, 1].
pub fn resample(values: &[f64], g: usize) -> Vec<f64> {
    let t = values.len();
    if t == 1 || g == 1 {
        return vec![values[0]; g];
    }
    (0..g)
        .map(|j| {
            let x = (j * (t - 1)) as f64 / (g - 1) as f64;
            let i = x.floor() as usize;
            if i >= t - 1 {
                values[t - 1]
            } else {
                let frac = x - i as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        })
        .collect()
}

pub fn interpolate_and_aggregate(curves: &[SimilarityCurve], mode: TargetMode) -> Result<AggregatedCurve, AnalysisError> {
    if curves.is_empty() || curves.iter().any(|c| c.values.is_empty()) {
        return Err(AnalysisError::EmptyInput);
    }
    if curves.iter().flat_map(|c| &c.values).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let g = match mode {
        TargetMode::MeanSteps => {
            let mean = curves.iter().map(|c| c.values.len()).sum::<usize>() as f64 / curves.len() as f64;
            (mean.round() as usize).max(1)
        }
        TargetMode::MaxSteps => curves.iter().map(|c| c.values.len()).max().unwrap_or(1),
    };
    let rows: Vec<Vec<f64>> = curves.iter().map(|c| resample(&c.values, g)).collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; g];
    let mut stderr = vec![0.0; g];
    for j in 0..g {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        mean[j] = m;
        if rows.len() > 1 {
            let var = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
            stderr[j] = (var / n).sqrt();
        }
    }
    let grid = (0..g).map(|j| if g == 1 { 0.0 } else { j as f64 / (g - 1) as f64 }).collect();
    Ok(AggregatedCurve {
        grid,
        mean,
        stderr,
        n_curves: rows.len(),
    })
}

pub fn curve_csv(curve: &AggregatedCurve) -> String {
    let mut out = String::from("grid_index,mean,stderr,n_curves\n");
    for j in 0..curve.mean.len() {
        out.push_str(&format!("{j},{},{},{}\n", curve.mean[j], curve.stderr[j], curve.n_curves));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub question_id: String,
    pub seed: u64,
    pub first_step_text: String,
    pub conclusion_text: String,
    pub prediction: Prediction,
    pub first_correct: Option<bool>,
    pub final_correct: Option<bool>,
    pub finish_reason: FinishReason,
    pub conclusion_tokens: u64,
}

/// Generates a conclusion from the first step alone, with the think block
/// closed right after it, and extracts its prediction.
pub fn force_first_step_conclusion(
    generator: &dyn Generator,
    q: &Question,
    first_step: &str,
    params: &DecodingParams,
) -> Result<(String, Prediction, FinishReason, u64), AnalysisError> {
    let request = GenerationRequest {
        prompt: q.prompt.clone(),
        prefix: format!("{first_step}{}", generator.think_close()),
        params: *params,
        stop_condition: StopCondition::MaxTokensOnly,
    };
    let r = generator.generate(&request)?;
    let prediction = if r.text.trim().is_empty() {
        Prediction::absent()
    } else {
        extract_prediction(&r.text, q.answer_kind)
    };
    Ok((r.text, prediction, r.finish_reason, r.usage_completion_tokens))
}

/// First keyword-delimited step of a record's reasoning.
pub fn first_step_of(record: &TraceRecord, profile: &KeywordProfile, close: &str) -> Result<String, AnalysisError> {
    let full = record.full_text();
    let seg = segment_steps(think_text(&full, close), profile)?;
    Ok(seg.steps[0].clone())
}

pub fn probe_record(
    generator: &dyn Generator,
    q: &Question,
    record: &TraceRecord,
    profile: &KeywordProfile,
    params: &DecodingParams,
) -> Result<ProbeRecord, AnalysisError> {
    let first = first_step_of(record, profile, generator.think_close())?;
    let (conclusion, prediction, finish_reason, tokens) =
        force_first_step_conclusion(generator, q, &first, &params.with_seed(record.seed))?;
    let first_correct = match q.answer_kind {
        AnswerKind::ExternalVerdict => None,
        _ => Some(prediction.present && prediction.canonical == q.answer),
    };
    Ok(ProbeRecord {
        question_id: q.id.clone(),
        seed: record.seed,
        first_step_text: first,
        conclusion_text: conclusion,
        prediction,
        first_correct,
        final_correct: record.correct,
        finish_reason,
        conclusion_tokens: tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbVariant {
    CorrectBaseline,
    Incorrect,
}

pub const PERTURB_DELTAS: [i64; 4] = [1, -1, 10, -10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedFirstStep {
    pub source_question_id: String,
    pub variant: PerturbVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<i64>,
    pub text: String,
    pub replacement_sites: usize,
}

const RELATIONS: [&str; 6] = ["=", "\\Rightarrow", "⇒", "\\implies", "\\rightarrow", "\\to"];

/// True when the text just before `at` ends in a relation such as `=` or
/// `\Rightarrow`, skipping whitespace, `$` and an opening `\boxed{`.
fn follows_relation(text: &str, at: usize) -> bool {
    let mut before = &text[..at];
    loop {
        let trimmed = before.trim_end().trim_end_matches('$').trim_end();
        let trimmed = trimmed.strip_suffix("\\boxed{").unwrap_or(trimmed);
        if trimmed.len() == before.len() {
            break;
        }
        before = trimmed;
    }
    RELATIONS.iter().any(|r| before.ends_with(r))
}

fn answer_mentions(text: &str, q: &Question) -> Vec<(usize, usize)> {
    match q.answer_kind {
        AnswerKind::Integer => integer_occurrences(text, &q.answer),
        _ => {
            if q.answer.is_empty() {
                return Vec::new();
            }
            let lower = text.to_lowercase();
            if lower.len() != text.len() {
                return Vec::new();
            }
            lower
                .match_indices(q.answer.as_str())
                .map(|(i, m)| (i, i + m.len()))
                .collect()
        }
    }
}

/// Removes the answer-revealing parts of a correct conclusion:
///
/// 1. sentences containing "final answer";
/// 2. sentences mentioning the answer within the last 20% of the text,
///    unless the mention is the result of a relation (`... = 113`);
/// 3. boxed groups, which are unwrapped when they hold such a result and
///    deleted otherwise.
pub fn strip_answer_disclosure(conclusion: &str, q: &Question) -> String {
    let len = conclusion.len();
    let mut kept = String::with_capacity(len);
    for (s, e) in sentence_spans(conclusion) {
        let sentence = &conclusion[s..e];
        if sentence.to_lowercase().contains("final answer") {
            continue;
        }
        let reveals = answer_mentions(sentence, q)
            .into_iter()
            .any(|(ms, _)| (s + ms) * 5 >= len * 4 && !follows_relation(conclusion, s + ms));
        if !reveals {
            kept.push_str(sentence);
        }
    }
    let mut out = String::with_capacity(kept.len());
    let mut cursor = 0;
    for span in boxed_spans(&kept) {
        out.push_str(&kept[cursor..span.start]);
        if follows_relation(&kept, span.start) {
            out.push_str(&kept[span.content.0..span.content.1]);
        }
        cursor = span.end;
    }
    out.push_str(&kept[cursor..]);
    while out.contains("\\boxed") {
        out = out.replace("\\boxed", "");
    }
    out
}

pub fn build_perturbed_first_step(
    conclusion: &str,
    q: &Question,
    variant: PerturbVariant,
    delta: i64,
) -> Result<PerturbedFirstStep, AnalysisError> {
    let p = extract_prediction(conclusion, q.answer_kind);
    if !p.present || p.canonical != q.answer {
        return Err(AnalysisError::SourceNotCorrect);
    }
    let baseline = strip_answer_disclosure(conclusion, q);
    match variant {
        PerturbVariant::CorrectBaseline => Ok(PerturbedFirstStep {
            source_question_id: q.id.clone(),
            variant,
            delta: None,
            text: baseline,
            replacement_sites: 0,
        }),
        PerturbVariant::Incorrect => {
            let answer: i64 = match (q.answer_kind, q.answer.parse()) {
                (AnswerKind::Integer, Ok(a)) => a,
                _ => return Err(AnalysisError::UnsupportedKind),
            };
            let sites = integer_occurrences(&baseline, &q.answer);
            if sites.is_empty() {
                return Err(AnalysisError::NoReplacementSites);
            }
            let wrong = (answer + delta).to_string();
            let mut text = String::with_capacity(baseline.len());
            let mut cursor = 0;
            for &(s, e) in &sites {
                text.push_str(&baseline[cursor..s]);
                text.push_str(&wrong);
                cursor = e;
            }
            text.push_str(&baseline[cursor..]);
            Ok(PerturbedFirstStep {
                source_question_id: q.id.clone(),
                variant,
                delta: Some(delta),
                text,
                replacement_sites: sites.len(),
            })
        }
    }
}

/// The literal continuation cue appended after an injected first step.
pub const CONTINUATION_CUE: &str = "Alternatively";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub question_id: String,
    pub variant: PerturbVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<i64>,
    pub trial: usize,
    pub record: TraceRecord,
}

impl TrialRecord {
    pub fn key(&self) -> (String, PerturbVariant, Option<i64>, usize) {
        (self.question_id.clone(), self.variant, self.delta, self.trial)
    }
}

/// Resumes generation after the injected step and the cue, then scores the trace.
pub fn run_perturbation_trial(
    generator: &dyn Generator,
    q: &Question,
    pfs: &PerturbedFirstStep,
    params: &DecodingParams,
    trial: usize,
) -> Result<TrialRecord, AnalysisError> {
    let prefix = format!("{}{CONTINUATION_CUE}", pfs.text);
    let request = GenerationRequest {
        prompt: q.prompt.clone(),
        prefix: prefix.clone(),
        params: *params,
        stop_condition: StopCondition::ThinkCloseThenConclude,
    };
    let r = generator.generate(&request)?;
    let record = TraceRecord::assemble(
        q,
        params.seed,
        generator.think_close(),
        prefix,
        0,
        r.text,
        r.usage_completion_tokens,
        r.finish_reason,
        r.usage_source,
    );
    Ok(TrialRecord {
        question_id: q.id.clone(),
        variant: pfs.variant,
        delta: pfs.delta,
        trial,
        record,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSettings {
    pub trials: usize,
    pub deltas: Vec<i64>,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self {
            trials: 8,
            deltas: PERTURB_DELTAS.to_vec(),
        }
    }
}

/// Counts from a dataset-level analysis run.
#[derive(Debug, Default)]
pub struct AnalysisSummary {
    pub processed: usize,
    pub skipped: BTreeMap<String, usize>,
    pub failures: Vec<(String, String)>,
}

impl AnalysisSummary {
    fn skip(&mut self, reason: &str) {
        *self.skipped.entry(reason.to_string()).or_default() += 1;
    }
}

/// Baseline records per question, in seed order.
fn sources(store: &RunStore) -> Result<HashMap<String, Vec<TraceRecord>>, StoreError> {
    let mut by_q: HashMap<String, Vec<TraceRecord>> = HashMap::new();
    for r in store.load::<TraceRecord>(RecordFile::Baseline)? {
        by_q.entry(r.question_id.clone()).or_default().push(r);
    }
    for v in by_q.values_mut() {
        v.sort_by_key(|r| r.seed);
    }
    Ok(by_q)
}

type Outcome = (usize, Vec<&'static str>, Option<String>);

fn collect_summary(results: Vec<Outcome>, questions: &[Question]) -> AnalysisSummary {
    let mut s = AnalysisSummary::default();
    for ((done, skips, err), q) in results.into_iter().zip(questions) {
        s.processed += done;
        for k in skips {
            s.skip(k);
        }
        if let Some(e) = err {
            s.failures.push((q.id.clone(), e));
        }
    }
    s
}

fn error_line(phase: Phase, q: &Question, e: &AnalysisError) -> ErrorLine {
    ErrorLine {
        question_id: Some(q.id.clone()),
        phase: Some(phase),
        kind: "analysis".into(),
        message: e.to_string(),
    }
}

const PROBE_FILES: &[RecordFile] = &[RecordFile::Probes, RecordFile::Errors];
const CURVE_FILES: &[RecordFile] = &[RecordFile::Curves, RecordFile::Errors];
const TRIAL_FILES: &[RecordFile] = &[RecordFile::Trials, RecordFile::Errors];

/// Forced first-step conclusions for every baseline record of the run.
pub fn run_probe_dataset(
    generator: &dyn Generator,
    questions: &[Question],
    store: &RunStore,
    profile: &KeywordProfile,
    params: &DecodingParams,
    workers: usize,
) -> Result<AnalysisSummary, AnalysisError> {
    let sources = sources(store)?;
    let done: HashSet<(String, u64)> = store
        .load::<ProbeRecord>(RecordFile::Probes)?
        .into_iter()
        .map(|p| (p.question_id, p.seed))
        .collect();
    let seq = Sequencer::new(store);
    let results = build_pool(workers).install(|| {
        questions
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut sink = ItemSink::new(&seq, i, PROBE_FILES);
                let Some(records) = sources.get(&q.id) else {
                    return (0, vec!["no_baseline_records"], None);
                };
                let todo: Vec<&TraceRecord> =
                    records.iter().filter(|r| !done.contains(&(q.id.clone(), r.seed))).collect();
                let out: Result<Vec<ProbeRecord>, AnalysisError> =
                    todo.par_iter().map(|r| probe_record(generator, q, r, profile, params)).collect();
                match out.and_then(|probes| {
                    sink.commit(RecordFile::Probes, &probes)?;
                    Ok(probes.len())
                }) {
                    Ok(n) => (n, vec![], None),
                    Err(e) => {
                        let _ = sink.commit(RecordFile::Errors, &[error_line(Phase::Probe, q, &e)]);
                        (0, vec![], Some(e.to_string()))
                    }
                }
            })
            .collect()
    });
    Ok(collect_summary(results, questions))
}

/// Similarity curves for every baseline record with a conclusion.
pub fn run_similarity_dataset<E: Embedder>(
    questions: &[Question],
    store: &RunStore,
    profile: &KeywordProfile,
    embedder: &EmbeddingClient<E>,
    close: &str,
    workers: usize,
) -> Result<AnalysisSummary, AnalysisError> {
    let sources = sources(store)?;
    let done: HashSet<(String, u64)> = store
        .load::<SimilarityCurve>(RecordFile::Curves)?
        .into_iter()
        .filter(|c| c.model_family == profile.model_family)
        .map(|c| (c.question_id, c.seed))
        .collect();
    let seq = Sequencer::new(store);
    let results = build_pool(workers).install(|| {
        questions
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut sink = ItemSink::new(&seq, i, CURVE_FILES);
                let Some(records) = sources.get(&q.id) else {
                    return (0, vec!["no_baseline_records"], None);
                };
                let mut skips = Vec::new();
                let todo: Vec<&TraceRecord> = records
                    .iter()
                    .filter(|r| !done.contains(&(q.id.clone(), r.seed)))
                    .filter(|r| {
                        let keep = !r.conclusion_text.trim().is_empty();
                        if !keep {
                            skips.push("empty_conclusion");
                        }
                        keep
                    })
                    .collect();
                let out: Result<Vec<SimilarityCurve>, AnalysisError> =
                    todo.par_iter().map(|r| similarity_curve(r, q, profile, embedder, close)).collect();
                match out.and_then(|curves| {
                    sink.commit(RecordFile::Curves, &curves)?;
                    Ok(curves.len())
                }) {
                    Ok(n) => (n, skips, None),
                    Err(e) => {
                        let _ = sink.commit(RecordFile::Errors, &[error_line(Phase::Similarity, q, &e)]);
                        (0, skips, Some(e.to_string()))
                    }
                }
            })
            .collect()
    });
    Ok(collect_summary(results, questions))
}

/// Perturbation trials built from each question's lowest-seed correct
/// baseline conclusion.
pub fn run_perturb_dataset(
    generator: &dyn Generator,
    questions: &[Question],
    store: &RunStore,
    settings: &PerturbSettings,
    params: &DecodingParams,
    workers: usize,
) -> Result<AnalysisSummary, AnalysisError> {
    let sources = sources(store)?;
    let done: HashSet<(String, PerturbVariant, Option<i64>, usize)> =
        store.load::<TrialRecord>(RecordFile::Trials)?.iter().map(TrialRecord::key).collect();
    let seq = Sequencer::new(store);
    let results = build_pool(workers).install(|| {
        questions
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut sink = ItemSink::new(&seq, i, TRIAL_FILES);
                let source = sources
                    .get(&q.id)
                    .and_then(|rs| rs.iter().find(|r| r.correct == Some(true) && !r.conclusion_text.is_empty()));
                let Some(source) = source else {
                    return (0, vec!["no_correct_source"], None);
                };
                let mut skips = Vec::new();
                let mut steps = Vec::new();
                match build_perturbed_first_step(&source.conclusion_text, q, PerturbVariant::CorrectBaseline, 0) {
                    Ok(p) => steps.push(p),
                    Err(_) => return (0, vec!["source_not_correct"], None),
                }
                for &d in &settings.deltas {
                    match build_perturbed_first_step(&source.conclusion_text, q, PerturbVariant::Incorrect, d) {
                        Ok(p) => steps.push(p),
                        Err(AnalysisError::NoReplacementSites) => skips.push("no_replacement_sites"),
                        Err(AnalysisError::UnsupportedKind) => skips.push("unsupported_answer_kind"),
                        Err(_) => skips.push("source_not_correct"),
                    }
                }
                let jobs: Vec<(&PerturbedFirstStep, usize)> = steps
                    .iter()
                    .flat_map(|p| (0..settings.trials).map(move |t| (p, t)))
                    .filter(|(p, t)| !done.contains(&(q.id.clone(), p.variant, p.delta, *t)))
                    .collect();
                let out: Result<Vec<TrialRecord>, AnalysisError> = jobs
                    .par_iter()
                    .map(|(p, t)| {
                        let seed = params.seed.wrapping_add(*t as u64);
                        run_perturbation_trial(generator, q, p, &params.with_seed(seed), *t)
                    })
                    .collect();
                match out.and_then(|trials| {
                    sink.commit(RecordFile::Trials, &trials)?;
                    Ok(trials.len())
                }) {
                    Ok(n) => (n, skips, None),
                    Err(e) => {
                        let _ = sink.commit(RecordFile::Errors, &[error_line(Phase::Perturb, q, &e)]);
                        (0, skips, Some(e.to_string()))
                    }
                }
            })
            .collect()
    });
    Ok(collect_summary(results, questions))
}
