//! Generation, reward-scoring and embedding clients.
//!
//! Every client sits behind a small object-safe trait so the engine can be
//! driven by HTTP services or by the deterministic [`sim`] backend.

pub mod http;
pub mod sim;
pub mod template;

use std::sync::{Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::DecodingParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("first step is empty after splitting into scoring steps")]
    EmptyAfterSplit,
    #[error("embedding dimension changed from {expected} to {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding requested for empty text")]
    EmptyText,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    MaxTokensOnly,
    #[default]
    ThinkCloseThenConclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// The user query, without chat scaffolding.
    pub prompt: String,
    /// Text the model has already produced inside the think block.
    pub prefix: String,
    pub params: DecodingParams,
    pub stop_condition: StopCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopToken,
    LengthCap,
    BackendError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UsageSource {
    #[default]
    BackendReported,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage_prompt_tokens: u64,
    pub usage_completion_tokens: u64,
    pub usage_source: UsageSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub scorer_id: String,
}

pub trait Generator: Send + Sync {
    fn id(&self) -> String;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Marker that closes the think block for this model family.
    fn think_close(&self) -> &str {
        template::THINK_CLOSE
    }
}

/// A process reward model: one score per submitted step.
pub trait StepScorer: Send + Sync {
    fn id(&self) -> String;

    fn score_steps(&self, prompt: &str, steps: &[String]) -> Result<Vec<f64>, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

pub const PRM_STEP_DELIMITER: &str = "\n\n";

/// Splits a first step on the scoring delimiter. Joining the pieces with the
/// delimiter reproduces the input.
pub fn prm_steps(first_step: &str) -> Vec<String> {
    first_step.split(PRM_STEP_DELIMITER).map(str::to_string).collect()
}

/// Scores a candidate first step; the reward is the score of its final step.
pub fn score_first_step(scorer: &dyn StepScorer, prompt: &str, first_step: &str) -> Result<RewardScore, BackendError> {
    if first_step.trim().is_empty() {
        return Err(BackendError::EmptyAfterSplit);
    }
    let steps = prm_steps(first_step);
    let scores = scorer.score_steps(prompt, &steps)?;
    if scores.len() != steps.len() {
        return Err(BackendError::MalformedResponse(format!(
            "{} scores for {} steps",
            scores.len(),
            steps.len()
        )));
    }
    let value = *scores.last().expect("split yields at least one step");
    if !value.is_finite() {
        return Err(BackendError::MalformedResponse(format!("non-finite score {value}")));
    }
    Ok(RewardScore {
        value,
        scorer_id: scorer.id(),
    })
}

/// Embedding client that pins the vector dimension for the life of a run.
pub struct EmbeddingClient<E> {
    inner: E,
    dim: OnceLock<usize>,
}

impl<E: Embedder> EmbeddingClient<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            dim: OnceLock::new(),
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.embed_many(&[text.to_string()])?.remove(0))
    }

    pub fn embed_many(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(BackendError::EmptyText);
        }
        let vectors = self.inner.embed_batch(texts)?;
        if vectors.len() != texts.len() {
            return Err(BackendError::MalformedResponse(format!(
                "{} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        for v in &vectors {
            let expected = *self.dim.get_or_init(|| v.len());
            if v.len() != expected {
                return Err(BackendError::DimensionMismatch {
                    expected,
                    actual: v.len(),
                });
            }
        }
        Ok(vectors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let delay = self.delay_for(attempt);
                    tracing::warn!(error = %e, attempt = attempt + 1, ?delay, "retrying request");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests to one endpoint.
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("limit lock");
        while *used >= self.max {
            used = self.freed.wait(used).expect("limit lock");
        }
        *used += 1;
        Permit { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.used.lock().expect("limit lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.limit.used.lock().expect("limit lock");
        *used -= 1;
        self.limit.freed.notify_one();
    }
}

/// Wraps a generator with an in-flight bound.
pub struct Limited<G> {
    inner: G,
    limit: InFlightLimit,
}

impl<G> Limited<G> {
    pub fn new(inner: G, max_in_flight: usize) -> Self {
        Self {
            inner,
            limit: InFlightLimit::new(max_in_flight),
        }
    }
}

impl<G: Generator> Generator for Limited<G> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let _permit = self.limit.acquire();
        self.inner.generate(request)
    }

    fn think_close(&self) -> &str {
        self.inner.think_close()
    }
}

impl<S: StepScorer> StepScorer for Limited<S> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn score_steps(&self, prompt: &str, steps: &[String]) -> Result<Vec<f64>, BackendError> {
        let _permit = self.limit.acquire();
        self.inner.score_steps(prompt, steps)
    }
}

impl<E: Embedder> Embedder for Limited<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let _permit = self.limit.acquire();
        self.inner.embed_batch(texts)
    }
}

impl<T: Generator + ?Sized> Generator for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }

    fn think_close(&self) -> &str {
        (**self).think_close()
    }
}

impl<T: StepScorer + ?Sized> StepScorer for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn score_steps(&self, prompt: &str, steps: &[String]) -> Result<Vec<f64>, BackendError> {
        (**self).score_steps(prompt, steps)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed_batch(texts)
    }
}
