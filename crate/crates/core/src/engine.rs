//! Sample N first steps, keep the M best by reward, continue only those.
//!
//! The phase functions (`sample_first_steps`, `score_candidates`,
//! `select_top_m`, `continue_selected`) are usable on their own;
//! [`run_early_pruning`] chains them for one question in memory and
//! [`run_pipeline`] drives a whole dataset with persistence and resume.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{answers_equal, extract_prediction, AnswerKind, DecodingParams, DomainError, Prediction, Question};
use crate::backend::template::split_conclusion;
use crate::backend::{
    score_first_step, BackendError, FinishReason, GenerationRequest, GenerationResult, Generator, RewardScore,
    StepScorer, StopCondition, UsageSource,
};
use crate::store::{ItemSink, RecordFile, RunStore, Sequencer, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sample,
    Score,
    Select,
    Continue,
    Baseline,
    Probe,
    Similarity,
    Perturb,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Sample => "sample",
            Phase::Score => "score",
            Phase::Select => "select",
            Phase::Continue => "continue",
            Phase::Baseline => "baseline",
            Phase::Probe => "probe",
            Phase::Similarity => "similarity",
            Phase::Perturb => "perturb",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("[{phase}] question {question_id}: only {succeeded} of {attempted} requests succeeded (last error: {last_error})")]
    PartialFailure {
        phase: Phase,
        question_id: String,
        succeeded: usize,
        attempted: usize,
        last_error: String,
    },
    #[error("[select] question {question_id}: candidate seed {seed} has no reward")]
    UnscoredCandidate { question_id: String, seed: u64 },
    #[error("candidate seed {seed}: cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        seed: u64,
        from: CandidateStatus,
        to: CandidateStatus,
    },
    #[error("[{phase}] question {question_id}: {source}")]
    Backend {
        phase: Phase,
        question_id: String,
        source: BackendError,
    },
    #[error("[{phase}] {source}")]
    Store { phase: Phase, source: StoreError },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl EngineError {
    pub fn phase(&self) -> Option<Phase> {
        match self {
            EngineError::PartialFailure { phase, .. }
            | EngineError::Backend { phase, .. }
            | EngineError::Store { phase, .. } => Some(*phase),
            EngineError::UnscoredCandidate { .. } => Some(Phase::Select),
            _ => None,
        }
    }
}

fn store_err(phase: Phase) -> impl FnOnce(StoreError) -> EngineError {
    move |source| EngineError::Store { phase, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Sampled,
    Scored,
    Selected,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStepCandidate {
    pub question_id: String,
    pub seed: u64,
    pub text: String,
    pub token_count: u64,
    #[serde(default)]
    pub reward: Option<RewardScore>,
    pub status: CandidateStatus,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage_source: UsageSource,
}

impl FirstStepCandidate {
    fn advance(&mut self, to: CandidateStatus) -> Result<(), EngineError> {
        let ok = matches!(
            (self.status, to),
            (CandidateStatus::Sampled, CandidateStatus::Scored)
                | (CandidateStatus::Scored, CandidateStatus::Selected)
                | (CandidateStatus::Scored, CandidateStatus::Discarded)
        );
        if !ok {
            return Err(EngineError::InvalidTransition {
                seed: self.seed,
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    pub fn set_reward(&mut self, reward: RewardScore) -> Result<(), EngineError> {
        self.advance(CandidateStatus::Scored)?;
        self.reward = Some(reward);
        Ok(())
    }

    pub fn reward_value(&self) -> Option<f64> {
        self.reward.as_ref().map(|r| r.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub question_id: String,
    pub seed: u64,
    pub reward: RewardScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub question_id: String,
    pub keep_m: usize,
    /// Seeds in rank order, best first.
    pub selected: Vec<u64>,
    /// Seeds in ascending order.
    pub discarded: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    pub seed: u64,
    pub first_step_text: String,
    pub continuation_text: String,
    /// Text after the think-close marker; empty when the marker never appeared.
    pub conclusion_text: String,
    pub prediction: Prediction,
    pub correct: Option<bool>,
    pub first_step_tokens: u64,
    pub continuation_tokens: u64,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage_source: UsageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl TraceRecord {
    pub fn total_tokens(&self) -> u64 {
        self.first_step_tokens + self.continuation_tokens
    }

    pub fn full_text(&self) -> String {
        format!("{}{}", self.first_step_text, self.continuation_text)
    }

    /// Builds a record from a first step and its continuation.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        q: &Question,
        seed: u64,
        think_close: &str,
        first_step_text: String,
        first_step_tokens: u64,
        continuation_text: String,
        continuation_tokens: u64,
        finish_reason: FinishReason,
        usage_source: UsageSource,
    ) -> Self {
        let full = format!("{first_step_text}{continuation_text}");
        let conclusion = split_conclusion(&full, think_close).1.unwrap_or("").to_string();
        let prediction = if conclusion.is_empty() {
            Prediction::absent()
        } else {
            extract_prediction(&conclusion, q.answer_kind)
        };
        let correct = match q.answer_kind {
            AnswerKind::ExternalVerdict => None,
            _ => answers_equal(&prediction, q).ok(),
        };
        Self {
            question_id: q.id.clone(),
            seed,
            first_step_text,
            continuation_text,
            conclusion_text: conclusion,
            prediction,
            correct,
            first_step_tokens,
            continuation_tokens,
            finish_reason,
            usage_source,
            reward: None,
            rank: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Majority,
    PassAtK,
}

fn default_first_step_len() -> u32 {
    512
}

fn default_n() -> usize {
    64
}

fn default_m() -> usize {
    16
}

fn default_min_success() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_n")]
    pub n_candidates: usize,
    #[serde(default = "default_m")]
    pub keep_m: usize,
    #[serde(default = "default_first_step_len")]
    pub first_step_len: u32,
    /// `decoding.seed` is the base seed; candidate n uses `base + n`.
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// A phase proceeds when at least this share of its requests succeed.
    #[serde(default = "default_min_success")]
    pub min_success_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_candidates: default_n(),
            keep_m: default_m(),
            first_step_len: default_first_step_len(),
            decoding: DecodingParams::default(),
            aggregation: Aggregation::default(),
            min_success_fraction: default_min_success(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n_candidates: n,
            keep_m: m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_candidates == 0 || self.keep_m == 0 || self.keep_m > self.n_candidates {
            return Err(EngineError::InvalidConfig(format!(
                "need 1 <= M <= N, got N={} M={}",
                self.n_candidates, self.keep_m
            )));
        }
        if self.first_step_len == 0 {
            return Err(EngineError::InvalidConfig("first_step_len must be at least 1".into()));
        }
        if !(self.min_success_fraction > 0.0 && self.min_success_fraction <= 1.0) {
            return Err(EngineError::InvalidConfig(format!(
                "min_success_fraction {} outside (0, 1]",
                self.min_success_fraction
            )));
        }
        self.decoding.validate()?;
        Ok(())
    }

    pub fn seed(&self, n: usize) -> u64 {
        self.decoding.seed.wrapping_add(n as u64)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_candidates).map(|n| self.seed(n)).collect()
    }
}

/// Successful results of a fan-out phase plus the requests that failed.
#[derive(Debug)]
pub struct PhaseOutcome<T> {
    pub ok: Vec<T>,
    pub failures: Vec<(u64, BackendError)>,
}

impl<T> PhaseOutcome<T> {
    fn from_results(results: Vec<(u64, Result<T, BackendError>)>) -> Self {
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in results {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => failures.push((seed, e)),
            }
        }
        Self { ok, failures }
    }

    /// Applies the partial-failure policy: `already` results from earlier
    /// runs count toward the `expected` total.
    pub fn accept(
        self,
        phase: Phase,
        question_id: &str,
        already: usize,
        expected: usize,
        min_fraction: f64,
    ) -> Result<Vec<T>, EngineError> {
        if self.failures.is_empty() {
            return Ok(self.ok);
        }
        let succeeded = already + self.ok.len();
        let (seed, last) = self.failures.last().expect("non-empty");
        if succeeded == 0 || (succeeded as f64) < min_fraction * expected as f64 - 1e-9 {
            return Err(EngineError::PartialFailure {
                phase,
                question_id: question_id.to_string(),
                succeeded,
                attempted: expected,
                last_error: format!("seed {seed}: {last}"),
            });
        }
        tracing::warn!(%phase, question_id, failed = self.failures.len(), succeeded, "proceeding after partial failure");
        Ok(self.ok)
    }
}

fn generate(generator: &dyn Generator, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
    let r = generator.generate(request)?;
    if r.finish_reason == FinishReason::BackendError {
        return Err(BackendError::MalformedResponse("backend reported an error finish".into()));
    }
    Ok(r)
}

/// Samples first steps of at most `L` tokens for the given seeds, in seed order.
pub fn sample_seeds(
    generator: &dyn Generator,
    q: &Question,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> PhaseOutcome<FirstStepCandidate> {
    let results = seeds
        .par_iter()
        .map(|&seed| {
            let request = GenerationRequest {
                prompt: q.prompt.clone(),
                prefix: String::new(),
                params: cfg.decoding.with_seed(seed).with_max_tokens(cfg.first_step_len),
                stop_condition: StopCondition::MaxTokensOnly,
            };
            let r = generate(generator, &request).map(|r| FirstStepCandidate {
                question_id: q.id.clone(),
                seed,
                token_count: r.usage_completion_tokens,
                text: r.text,
                reward: None,
                status: CandidateStatus::Sampled,
                finish_reason: r.finish_reason,
                usage_source: r.usage_source,
            });
            (seed, r)
        })
        .collect();
    PhaseOutcome::from_results(results)
}

pub fn sample_first_steps(
    generator: &dyn Generator,
    q: &Question,
    cfg: &ExperimentConfig,
) -> PhaseOutcome<FirstStepCandidate> {
    sample_seeds(generator, q, cfg, &cfg.seeds())
}

/// Scores each candidate's first step against the raw question prompt.
pub fn score_candidates(
    scorer: &dyn StepScorer,
    q: &Question,
    candidates: Vec<FirstStepCandidate>,
) -> PhaseOutcome<FirstStepCandidate> {
    let results = candidates
        .into_par_iter()
        .map(|mut c| {
            let seed = c.seed;
            let r = score_first_step(scorer, &q.prompt, &c.text).and_then(|reward| {
                c.set_reward(reward)
                    .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
                Ok(c)
            });
            (seed, r)
        })
        .collect();
    PhaseOutcome::from_results(results)
}

/// Keeps the `m` highest-reward candidates, ties broken by ascending seed.
/// Returns (selected in rank order, discarded in seed order).
pub fn select_top_m(
    candidates: Vec<FirstStepCandidate>,
    m: usize,
) -> Result<(Vec<FirstStepCandidate>, Vec<FirstStepCandidate>), EngineError> {
    for c in &candidates {
        if c.status != CandidateStatus::Scored || c.reward.is_none() {
            return Err(EngineError::UnscoredCandidate {
                question_id: c.question_id.clone(),
                seed: c.seed,
            });
        }
    }
    let mut ranked = candidates;
    ranked.sort_by(|a, b| {
        let (ra, rb) = (a.reward_value().unwrap_or(f64::NAN), b.reward_value().unwrap_or(f64::NAN));
        rb.total_cmp(&ra).then(a.seed.cmp(&b.seed))
    });
    let keep = m.min(ranked.len());
    let mut discarded = ranked.split_off(keep);
    for c in &mut ranked {
        c.advance(CandidateStatus::Selected)?;
    }
    for c in &mut discarded {
        c.advance(CandidateStatus::Discarded)?;
    }
    discarded.sort_by_key(|c| c.seed);
    Ok((ranked, discarded))
}

/// Resumes each selected first step with its own seed until the conclusion
/// or the overall token cap.
pub fn continue_selected(
    generator: &dyn Generator,
    q: &Question,
    selected: &[FirstStepCandidate],
    cfg: &ExperimentConfig,
) -> PhaseOutcome<TraceRecord> {
    let close = generator.think_close().to_string();
    let results = selected
        .par_iter()
        .enumerate()
        .map(|(rank, c)| {
            let r = continue_one(generator, q, c, cfg, &close).map(|mut rec| {
                rec.rank = Some(rank);
                rec
            });
            (c.seed, r)
        })
        .collect();
    PhaseOutcome::from_results(results)
}

fn continue_one(
    generator: &dyn Generator,
    q: &Question,
    c: &FirstStepCandidate,
    cfg: &ExperimentConfig,
    close: &str,
) -> Result<TraceRecord, BackendError> {
    let (text, tokens, finish, usage) = if c.finish_reason == FinishReason::StopToken {
        (String::new(), 0, FinishReason::StopToken, c.usage_source)
    } else {
        let budget = (cfg.decoding.max_tokens as u64).saturating_sub(c.token_count).max(1);
        let request = GenerationRequest {
            prompt: q.prompt.clone(),
            prefix: c.text.clone(),
            params: cfg.decoding.with_seed(c.seed).with_max_tokens(budget.min(u32::MAX as u64) as u32),
            stop_condition: StopCondition::ThinkCloseThenConclude,
        };
        let r = generate(generator, &request)?;
        let usage = if r.usage_source == UsageSource::Approximate || c.usage_source == UsageSource::Approximate {
            UsageSource::Approximate
        } else {
            UsageSource::BackendReported
        };
        (r.text, r.usage_completion_tokens, r.finish_reason, usage)
    };
    let mut rec = TraceRecord::assemble(q, c.seed, close, c.text.clone(), c.token_count, text, tokens, finish, usage);
    rec.reward = c.reward_value();
    Ok(rec)
}

/// Plain sampling of full traces, the reference the pruned run is measured against.
pub fn run_baseline(
    generator: &dyn Generator,
    q: &Question,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> PhaseOutcome<TraceRecord> {
    let close = generator.think_close().to_string();
    let results = seeds
        .par_iter()
        .map(|&seed| {
            let request = GenerationRequest {
                prompt: q.prompt.clone(),
                prefix: String::new(),
                params: cfg.decoding.with_seed(seed),
                stop_condition: StopCondition::ThinkCloseThenConclude,
            };
            let r = generate(generator, &request).map(|r| {
                TraceRecord::assemble(
                    q,
                    seed,
                    &close,
                    String::new(),
                    0,
                    r.text,
                    r.usage_completion_tokens,
                    r.finish_reason,
                    r.usage_source,
                )
            });
            (seed, r)
        })
        .collect();
    PhaseOutcome::from_results(results)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub sample: f64,
    pub score: f64,
    pub continue_: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.sample + self.score + self.continue_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    /// Every sampled first step, discarded ones included.
    pub first_step_tokens_all_n: u64,
    pub continuation_tokens_kept_m: u64,
    pub baseline_total_tokens_n_full: Option<u64>,
    pub ratio_vs_baseline: Option<f64>,
    pub usage_source: UsageSource,
    pub mixed_usage_sources: bool,
    #[serde(skip)]
    pub wall_time_phases: PhaseTimes,
}

impl BudgetReport {
    pub fn pruned_total(&self) -> u64 {
        self.first_step_tokens_all_n + self.continuation_tokens_kept_m
    }

    /// Exact numerator and denominator of the ratio.
    pub fn ratio_parts(&self) -> Option<(u64, u64)> {
        self.baseline_total_tokens_n_full
            .filter(|&d| d > 0)
            .map(|d| (self.pruned_total(), d))
    }

    /// Sums several reports; the baseline is kept only when every part has one.
    pub fn combine(reports: &[BudgetReport]) -> BudgetReport {
        let first = reports.iter().map(|r| r.first_step_tokens_all_n).sum();
        let cont = reports.iter().map(|r| r.continuation_tokens_kept_m).sum();
        let baseline = reports
            .iter()
            .map(|r| r.baseline_total_tokens_n_full)
            .sum::<Option<u64>>()
            .filter(|_| !reports.is_empty());
        let approx = reports.iter().any(|r| r.usage_source == UsageSource::Approximate);
        let reported = reports.iter().any(|r| r.usage_source == UsageSource::BackendReported);
        let mut wall = PhaseTimes::default();
        for r in reports {
            wall.sample += r.wall_time_phases.sample;
            wall.score += r.wall_time_phases.score;
            wall.continue_ += r.wall_time_phases.continue_;
        }
        finish_budget(None, first, cont, baseline, approx, reported, reports.iter().any(|r| r.mixed_usage_sources), wall)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_budget(
    question_id: Option<String>,
    first: u64,
    cont: u64,
    baseline: Option<u64>,
    approx: bool,
    reported: bool,
    already_mixed: bool,
    wall: PhaseTimes,
) -> BudgetReport {
    let mixed = already_mixed || (approx && reported);
    if mixed {
        tracing::warn!(?question_id, "budget mixes backend-reported and approximate token counts");
    }
    BudgetReport {
        question_id,
        first_step_tokens_all_n: first,
        continuation_tokens_kept_m: cont,
        baseline_total_tokens_n_full: baseline,
        ratio_vs_baseline: baseline.filter(|&d| d > 0).map(|d| (first + cont) as f64 / d as f64),
        usage_source: if approx {
            UsageSource::Approximate
        } else {
            UsageSource::BackendReported
        },
        mixed_usage_sources: mixed,
        wall_time_phases: wall,
    }
}

/// Token accounting for one question: kept traces, the discarded first
/// steps, and optionally the plain-sampling baseline.
pub fn compute_budget(
    records: &[TraceRecord],
    discarded: &[FirstStepCandidate],
    baseline: Option<&[TraceRecord]>,
) -> BudgetReport {
    let first = records.iter().map(|r| r.first_step_tokens).sum::<u64>()
        + discarded.iter().map(|c| c.token_count).sum::<u64>();
    let cont = records.iter().map(|r| r.continuation_tokens).sum();
    let sources = records
        .iter()
        .map(|r| r.usage_source)
        .chain(discarded.iter().map(|c| c.usage_source))
        .chain(baseline.into_iter().flatten().map(|r| r.usage_source));
    let (mut approx, mut reported) = (false, false);
    for s in sources {
        match s {
            UsageSource::Approximate => approx = true,
            UsageSource::BackendReported => reported = true,
        }
    }
    let baseline_total = baseline.map(|b| b.iter().map(TraceRecord::total_tokens).sum());
    let question_id = records
        .first()
        .map(|r| r.question_id.clone())
        .or_else(|| discarded.first().map(|c| c.question_id.clone()));
    finish_budget(question_id, first, cont, baseline_total, approx, reported, false, PhaseTimes::default())
}

#[derive(Debug, Clone)]
pub struct PrunedQuestion {
    pub records: Vec<TraceRecord>,
    pub discarded: Vec<FirstStepCandidate>,
    pub budget: BudgetReport,
}

/// All phases for one question, in memory.
pub fn run_early_pruning(
    generator: &dyn Generator,
    scorer: &dyn StepScorer,
    q: &Question,
    cfg: &ExperimentConfig,
    baseline: Option<&[TraceRecord]>,
) -> Result<PrunedQuestion, EngineError> {
    cfg.validate()?;
    let n = cfg.n_candidates;
    let f = cfg.min_success_fraction;
    let t = Instant::now();
    let candidates = sample_first_steps(generator, q, cfg).accept(Phase::Sample, &q.id, 0, n, f)?;
    let sample = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let total = candidates.len();
    let scored = score_candidates(scorer, q, candidates).accept(Phase::Score, &q.id, 0, total, f)?;
    let score = t.elapsed().as_secs_f64();
    let (selected, discarded) = select_top_m(scored, cfg.keep_m)?;
    let t = Instant::now();
    let records = continue_selected(generator, q, &selected, cfg).accept(Phase::Continue, &q.id, 0, selected.len(), f)?;
    let mut budget = compute_budget(&records, &discarded, baseline);
    budget.wall_time_phases = PhaseTimes {
        sample,
        score,
        continue_: t.elapsed().as_secs_f64(),
    };
    Ok(PrunedQuestion {
        records,
        discarded,
        budget,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingLine {
    pub question_id: String,
    pub phase: Phase,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub kind: String,
    pub message: String,
}

impl ErrorLine {
    pub fn from_engine(question_id: Option<&str>, e: &EngineError) -> Self {
        let kind = match e {
            EngineError::InvalidConfig(_) => "invalid_config",
            EngineError::PartialFailure { .. } => "partial_failure",
            EngineError::UnscoredCandidate { .. } => "unscored_candidate",
            EngineError::InvalidTransition { .. } => "invalid_transition",
            EngineError::Backend { .. } => "backend",
            EngineError::Store { .. } => "store",
            EngineError::Domain(_) => "domain",
        };
        Self {
            question_id: question_id.map(str::to_string),
            phase: e.phase(),
            kind: kind.into(),
            message: e.to_string(),
        }
    }
}

/// Work already persisted in a run directory, keyed by (question, seed).
#[derive(Debug, Default)]
pub struct ResumeState {
    pub candidates: HashMap<String, BTreeMap<u64, FirstStepCandidate>>,
    pub scores: HashMap<(String, u64), RewardScore>,
    pub selections: HashMap<String, Selection>,
    pub records: HashMap<(String, u64), TraceRecord>,
    pub baseline: HashMap<(String, u64), TraceRecord>,
    pub budgets: HashSet<String>,
}

impl ResumeState {
    pub fn load(store: &RunStore) -> Result<Self, StoreError> {
        let mut s = Self::default();
        for c in store.load::<FirstStepCandidate>(RecordFile::Candidates)? {
            s.candidates.entry(c.question_id.clone()).or_default().insert(c.seed, c);
        }
        for l in store.load::<ScoreLine>(RecordFile::Scores)? {
            s.scores.insert((l.question_id, l.seed), l.reward);
        }
        for sel in store.load::<Selection>(RecordFile::Selections)? {
            s.selections.insert(sel.question_id.clone(), sel);
        }
        for r in store.load::<TraceRecord>(RecordFile::Records)? {
            s.records.insert((r.question_id.clone(), r.seed), r);
        }
        for r in store.load::<TraceRecord>(RecordFile::Baseline)? {
            s.baseline.insert((r.question_id.clone(), r.seed), r);
        }
        for b in store.load::<BudgetReport>(RecordFile::Budgets)? {
            if let Some(q) = b.question_id {
                s.budgets.insert(q);
            }
        }
        Ok(s)
    }

    pub fn baseline_for(&self, question_id: &str, seeds: &[u64]) -> Option<Vec<TraceRecord>> {
        seeds
            .iter()
            .map(|&s| self.baseline.get(&(question_id.to_string(), s)).cloned())
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct DatasetSummary {
    pub questions: usize,
    pub completed: usize,
    pub failures: Vec<(String, EngineError)>,
    pub budget: Option<BudgetReport>,
}

pub(crate) fn build_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .thread_name(|i| format!("firstprune-{i}"))
        .build()
        .expect("thread pool")
}

const PIPELINE_FILES: &[RecordFile] = &[
    RecordFile::Candidates,
    RecordFile::Scores,
    RecordFile::Selections,
    RecordFile::Records,
    RecordFile::Budgets,
    RecordFile::Timings,
    RecordFile::Errors,
];

/// Execution settings for a dataset run.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub workers: usize,
    /// Last phase to execute; later phases are left for a subsequent run.
    pub stop_after: Phase,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            workers: 4,
            stop_after: Phase::Continue,
        }
    }
}

/// Runs early pruning over a dataset, persisting each phase and skipping
/// (question, seed, phase) work already present in the store. Record files
/// are written in dataset order whatever the worker count.
pub fn run_pipeline(
    generator: &dyn Generator,
    scorer: &dyn StepScorer,
    questions: &[Question],
    cfg: &ExperimentConfig,
    store: &RunStore,
    settings: RunSettings,
) -> Result<DatasetSummary, EngineError> {
    cfg.validate()?;
    let resume = ResumeState::load(store).map_err(store_err(Phase::Sample))?;
    let seq = Sequencer::new(store);
    let pool = build_pool(settings.workers);
    let results: Vec<Result<Option<BudgetReport>, EngineError>> = pool.install(|| {
        questions
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut sink = ItemSink::new(&seq, i, PIPELINE_FILES);
                let r = pipeline_question(generator, scorer, q, cfg, &resume, &mut sink, settings.stop_after);
                if let Err(e) = &r {
                    tracing::error!(question_id = %q.id, error = %e, "question aborted");
                    let _ = sink.commit(RecordFile::Errors, &[ErrorLine::from_engine(Some(&q.id), e)]);
                }
                r
            })
            .collect()
    });
    summarize(questions, results)
}

fn summarize(
    questions: &[Question],
    results: Vec<Result<Option<BudgetReport>, EngineError>>,
) -> Result<DatasetSummary, EngineError> {
    let mut summary = DatasetSummary {
        questions: questions.len(),
        ..DatasetSummary::default()
    };
    let mut budgets = Vec::new();
    for (q, r) in questions.iter().zip(results) {
        match r {
            Ok(b) => {
                summary.completed += 1;
                budgets.extend(b);
            }
            Err(EngineError::Store { phase, source }) => return Err(EngineError::Store { phase, source }),
            Err(e) => summary.failures.push((q.id.clone(), e)),
        }
    }
    if !budgets.is_empty() {
        summary.budget = Some(BudgetReport::combine(&budgets));
    }
    Ok(summary)
}

fn pipeline_question(
    generator: &dyn Generator,
    scorer: &dyn StepScorer,
    q: &Question,
    cfg: &ExperimentConfig,
    resume: &ResumeState,
    sink: &mut ItemSink<'_, '_>,
    stop_after: Phase,
) -> Result<Option<BudgetReport>, EngineError> {
    let n = cfg.n_candidates;
    let f = cfg.min_success_fraction;
    let seeds = cfg.seeds();
    let mut timings = Vec::new();
    let mut wall = PhaseTimes::default();

    // Sample.
    let have = resume.candidates.get(&q.id);
    let mut by_seed: BTreeMap<u64, FirstStepCandidate> =
        seeds.iter().filter_map(|s| have.and_then(|h| h.get(s)).cloned().map(|c| (*s, c))).collect();
    let missing: Vec<u64> = seeds.iter().copied().filter(|s| !by_seed.contains_key(s)).collect();
    if !missing.is_empty() {
        let t = Instant::now();
        let fresh = sample_seeds(generator, q, cfg, &missing).accept(Phase::Sample, &q.id, by_seed.len(), n, f)?;
        wall.sample = t.elapsed().as_secs_f64();
        timings.push(TimingLine {
            question_id: q.id.clone(),
            phase: Phase::Sample,
            seconds: wall.sample,
        });
        sink.commit(RecordFile::Candidates, &fresh).map_err(store_err(Phase::Sample))?;
        by_seed.extend(fresh.into_iter().map(|c| (c.seed, c)));
    }
    if stop_after == Phase::Sample {
        sink.commit(RecordFile::Timings, &timings).map_err(store_err(Phase::Sample))?;
        return Ok(None);
    }

    // Score.
    let mut scored = Vec::new();
    let mut unscored = Vec::new();
    for (seed, mut c) in by_seed {
        match resume.scores.get(&(q.id.clone(), seed)) {
            Some(r) => {
                c.set_reward(r.clone())?;
                scored.push(c);
            }
            None => unscored.push(c),
        }
    }
    let total = scored.len() + unscored.len();
    if !unscored.is_empty() {
        let t = Instant::now();
        let fresh = score_candidates(scorer, q, unscored).accept(Phase::Score, &q.id, scored.len(), total, f)?;
        wall.score = t.elapsed().as_secs_f64();
        timings.push(TimingLine {
            question_id: q.id.clone(),
            phase: Phase::Score,
            seconds: wall.score,
        });
        let lines: Vec<ScoreLine> = fresh
            .iter()
            .map(|c| ScoreLine {
                question_id: q.id.clone(),
                seed: c.seed,
                reward: c.reward.clone().expect("scored"),
            })
            .collect();
        sink.commit(RecordFile::Scores, &lines).map_err(store_err(Phase::Score))?;
        scored.extend(fresh);
    }
    scored.sort_by_key(|c| c.seed);
    if stop_after == Phase::Score {
        sink.commit(RecordFile::Timings, &timings).map_err(store_err(Phase::Score))?;
        return Ok(None);
    }

    // Select.
    let (selected, discarded) = match resume.selections.get(&q.id).filter(|s| s.keep_m == cfg.keep_m) {
        Some(sel) => {
            let mut pool: HashMap<u64, FirstStepCandidate> = scored.into_iter().map(|c| (c.seed, c)).collect();
            let mut take = |seeds: &[u64], status| -> Result<Vec<FirstStepCandidate>, EngineError> {
                seeds
                    .iter()
                    .map(|s| {
                        let mut c = pool.remove(s).ok_or_else(|| EngineError::UnscoredCandidate {
                            question_id: q.id.clone(),
                            seed: *s,
                        })?;
                        c.advance(status)?;
                        Ok(c)
                    })
                    .collect()
            };
            let selected = take(&sel.selected, CandidateStatus::Selected)?;
            let discarded = take(&sel.discarded, CandidateStatus::Discarded)?;
            (selected, discarded)
        }
        None => {
            let (selected, discarded) = select_top_m(scored, cfg.keep_m)?;
            let sel = Selection {
                question_id: q.id.clone(),
                keep_m: cfg.keep_m,
                selected: selected.iter().map(|c| c.seed).collect(),
                discarded: discarded.iter().map(|c| c.seed).collect(),
            };
            sink.commit(RecordFile::Selections, &[sel]).map_err(store_err(Phase::Select))?;
            (selected, discarded)
        }
    };
    if stop_after == Phase::Select {
        sink.commit(RecordFile::Timings, &timings).map_err(store_err(Phase::Select))?;
        return Ok(None);
    }

    // Continue.
    let mut records: Vec<Option<TraceRecord>> = selected
        .iter()
        .enumerate()
        .map(|(rank, c)| {
            resume.records.get(&(q.id.clone(), c.seed)).cloned().map(|mut r| {
                r.rank = Some(rank);
                r
            })
        })
        .collect();
    let todo: Vec<(usize, FirstStepCandidate)> = selected
        .iter()
        .enumerate()
        .filter(|(i, _)| records[*i].is_none())
        .map(|(i, c)| (i, c.clone()))
        .collect();
    if !todo.is_empty() {
        let t = Instant::now();
        let cands: Vec<FirstStepCandidate> = todo.iter().map(|(_, c)| c.clone()).collect();
        let done = selected.len() - todo.len();
        let fresh = continue_selected(generator, q, &cands, cfg).accept(Phase::Continue, &q.id, done, selected.len(), f)?;
        wall.continue_ = t.elapsed().as_secs_f64();
        timings.push(TimingLine {
            question_id: q.id.clone(),
            phase: Phase::Continue,
            seconds: wall.continue_,
        });
        let mut fresh_ranked = Vec::new();
        for mut r in fresh {
            let (rank, _) = todo.iter().find(|(_, c)| c.seed == r.seed).expect("continued seed");
            r.rank = Some(*rank);
            records[*rank] = Some(r.clone());
            fresh_ranked.push(r);
        }
        sink.commit(RecordFile::Records, &fresh_ranked).map_err(store_err(Phase::Continue))?;
    }
    let records: Vec<TraceRecord> = records.into_iter().flatten().collect();

    let baseline = resume.baseline_for(&q.id, &seeds);
    let mut budget = compute_budget(&records, &discarded, baseline.as_deref());
    budget.question_id = Some(q.id.clone());
    budget.wall_time_phases = wall;
    if !resume.budgets.contains(&q.id) {
        sink.commit(RecordFile::Budgets, std::slice::from_ref(&budget)).map_err(store_err(Phase::Continue))?;
    }
    sink.commit(RecordFile::Timings, &timings).map_err(store_err(Phase::Continue))?;
    Ok(Some(budget))
}

const BASELINE_FILES: &[RecordFile] = &[RecordFile::Baseline, RecordFile::Timings, RecordFile::Errors];

/// Plain N-sample runs over a dataset, persisted to the baseline file.
pub fn run_baseline_dataset(
    generator: &dyn Generator,
    questions: &[Question],
    cfg: &ExperimentConfig,
    store: &RunStore,
    workers: usize,
) -> Result<DatasetSummary, EngineError> {
    cfg.validate()?;
    let resume = ResumeState::load(store).map_err(store_err(Phase::Baseline))?;
    let seq = Sequencer::new(store);
    let pool = build_pool(workers);
    let seeds = cfg.seeds();
    let results = pool.install(|| {
        questions
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut sink = ItemSink::new(&seq, i, BASELINE_FILES);
                let missing: Vec<u64> = seeds
                    .iter()
                    .copied()
                    .filter(|s| !resume.baseline.contains_key(&(q.id.clone(), *s)))
                    .collect();
                let r = (|| {
                    if missing.is_empty() {
                        return Ok(None);
                    }
                    let t = Instant::now();
                    let done = seeds.len() - missing.len();
                    let fresh = run_baseline(generator, q, cfg, &missing).accept(
                        Phase::Baseline,
                        &q.id,
                        done,
                        seeds.len(),
                        cfg.min_success_fraction,
                    )?;
                    let timing = TimingLine {
                        question_id: q.id.clone(),
                        phase: Phase::Baseline,
                        seconds: t.elapsed().as_secs_f64(),
                    };
                    sink.commit(RecordFile::Baseline, &fresh).map_err(store_err(Phase::Baseline))?;
                    sink.commit(RecordFile::Timings, &[timing]).map_err(store_err(Phase::Baseline))?;
                    Ok(None)
                })();
                if let Err(e) = &r {
                    let _ = sink.commit(RecordFile::Errors, &[ErrorLine::from_engine(Some(&q.id), e)]);
                }
                r
            })
            .collect()
    });
    summarize(questions, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{OracleScorer, SimProfile, SimWorld, SimulatedBackend};
    use proptest::prelude::*;

    fn scored(seed: u64, value: f64) -> FirstStepCandidate {
        FirstStepCandidate {
            question_id: "q".into(),
            seed,
            text: String::new(),
            token_count: 1,
            reward: Some(RewardScore {
                value,
                scorer_id: "t".into(),
            }),
            status: CandidateStatus::Scored,
            finish_reason: FinishReason::LengthCap,
            usage_source: UsageSource::BackendReported,
        }
    }

    #[test]
    fn ties_break_by_ascending_seed() {
        let cands = vec![scored(0, 0.9), scored(1, 0.1), scored(2, 0.9), scored(3, 0.5)];
        let (sel, dis) = select_top_m(cands, 2).unwrap();
        assert_eq!(sel.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(dis.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![1, 3]);
        let cands = vec![scored(5, 0.9), scored(1, 0.9), scored(3, 0.9)];
        let (sel, _) = select_top_m(cands, 2).unwrap();
        assert_eq!(sel.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![1, 3]);
        assert!(sel.iter().all(|c| c.status == CandidateStatus::Selected));
    }

    #[test]
    fn unscored_candidates_are_rejected() {
        let mut c = scored(0, 0.5);
        c.status = CandidateStatus::Sampled;
        c.reward = None;
        assert!(matches!(select_top_m(vec![c], 1), Err(EngineError::UnscoredCandidate { seed: 0, .. })));
    }

    #[test]
    fn status_only_moves_forward() {
        let mut c = scored(0, 0.5);
        c.advance(CandidateStatus::Selected).unwrap();
        assert!(c.advance(CandidateStatus::Discarded).is_err());
        assert!(c.advance(CandidateStatus::Scored).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::new(4, 5).validate().is_err());
        assert!(ExperimentConfig::new(4, 0).validate().is_err());
        assert!(ExperimentConfig::new(4, 4).validate().is_ok());
        assert_eq!(ExperimentConfig::default().first_step_len, 512);
        let cfg = ExperimentConfig::new(3, 1);
        assert_eq!(cfg.seeds(), vec![0, 1, 2]);
    }

    #[test]
    fn budget_ratio_parts_are_exact() {
        let rec = |first, cont| TraceRecord {
            question_id: "q".into(),
            seed: 0,
            first_step_text: String::new(),
            continuation_text: String::new(),
            conclusion_text: String::new(),
            prediction: Prediction::absent(),
            correct: Some(false),
            first_step_tokens: first,
            continuation_tokens: cont,
            finish_reason: FinishReason::StopToken,
            usage_source: UsageSource::BackendReported,
            reward: None,
            rank: None,
        };
        let kept: Vec<_> = (0..16).map(|_| rec(512, 12288)).collect();
        let mut discarded = Vec::new();
        for s in 0..48 {
            let mut c = scored(s, 0.0);
            c.token_count = 512;
            discarded.push(c);
        }
        let baseline: Vec<_> = (0..64).map(|_| rec(0, 12800)).collect();
        let b = compute_budget(&kept, &discarded, Some(&baseline));
        assert_eq!(b.ratio_parts(), Some((64 * 512 + 16 * 12288, 64 * 12800)));
        assert!((b.ratio_vs_baseline.unwrap() - 0.28).abs() < 1e-12);
        assert!(!b.mixed_usage_sources);
        let none = compute_budget(&kept, &discarded, None);
        assert_eq!(none.ratio_vs_baseline, None);
        let mut approx = rec(0, 1);
        approx.usage_source = UsageSource::Approximate;
        assert!(compute_budget(&[approx], &discarded, None).mixed_usage_sources);
    }

    #[test]
    fn partial_failure_policy() {
        let outcome = |ok: usize, bad: usize| PhaseOutcome {
            ok: vec![(); ok],
            failures: (0..bad as u64).map(|s| (s, BackendError::Transport("x".into()))).collect(),
        };
        assert!(outcome(58, 6).accept(Phase::Sample, "q", 0, 64, 0.9).is_ok());
        assert!(matches!(
            outcome(57, 7).accept(Phase::Sample, "q", 0, 64, 0.9),
            Err(EngineError::PartialFailure { succeeded: 57, attempted: 64, .. })
        ));
        assert!(outcome(0, 1).accept(Phase::Sample, "q", 63, 64, 0.9).is_ok());
    }

    #[test]
    fn pruning_with_m_equal_n_matches_baseline() {
        let qs: Vec<Question> =
            (0..3).map(|i| Question::new(format!("q{i}"), format!("p{i}"), "42", AnswerKind::Integer)).collect();
        let world = SimWorld::new(SimProfile::new(0.8, 0.3, 0.5, 3000), qs.clone()).unwrap();
        let g = SimulatedBackend::new(world.clone());
        let s = OracleScorer::new(world);
        let mut cfg = ExperimentConfig::new(8, 8);
        cfg.decoding.seed = 100;
        for q in &qs {
            let base = run_baseline(&g, q, &cfg, &cfg.seeds()).ok;
            let pruned = run_early_pruning(&g, &s, q, &cfg, Some(&base)).unwrap();
            let mut a: Vec<String> = base.iter().map(|r| r.full_text()).collect();
            let mut b: Vec<String> = pruned.records.iter().map(|r| r.full_text()).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert_eq!(pruned.budget.ratio_parts().map(|(n, d)| n == d), Some(true));
        }
    }

    proptest! {
        #[test]
        fn selection_dominance(values in proptest::collection::vec(0u8..8, 1..60), m in 1usize..60) {
            let cands: Vec<_> = values.iter().enumerate().map(|(i, v)| scored(i as u64, *v as f64 / 8.0)).collect();
            let (sel, dis) = select_top_m(cands, m).unwrap();
            prop_assert_eq!(sel.len(), m.min(values.len()));
            let min_sel = sel.iter().filter_map(|c| c.reward_value()).fold(f64::INFINITY, f64::min);
            let max_dis = dis.iter().filter_map(|c| c.reward_value()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_sel >= max_dis);
        }

        #[test]
        fn cost_is_monotone_in_m(m1 in 1usize..8, m2 in 1usize..8) {
            let (lo, hi) = (m1.min(m2), m1.max(m2));
            let q = Question::new("q", "p", "7", AnswerKind::Integer);
            let world = SimWorld::new(SimProfile::new(0.8, 0.3, 0.5, 1500), vec![q.clone()]).unwrap();
            let g = SimulatedBackend::new(world.clone());
            let s = OracleScorer::new(world);
            let mut cfg = ExperimentConfig::new(8, lo);
            cfg.first_step_len = 128;
            let a = run_early_pruning(&g, &s, &q, &cfg, None).unwrap().budget.pruned_total();
            cfg.keep_m = hi;
            let b = run_early_pruning(&g, &s, &q, &cfg, None).unwrap().budget.pruned_total();
            prop_assert!(a <= b);
        }
    }
}
