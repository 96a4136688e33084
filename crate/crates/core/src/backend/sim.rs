//! Deterministic simulated backend.
//!
//! Every (question, seed) pair owns one canonical trace drawn from a
//! counter-based ChaCha stream keyed by a hash of the pair. The stream first
//! decides whether the first step is good, then its quality, then whether the
//! final answer is correct given that quality; the text is synthesized from a
//! second stream on the same key. One simulated token is one byte.
//!
//! Generation is prefix-consistent: resuming from any prefix of the
//! canonical trace returns the rest of that same trace, so sampling a first
//! step and continuing it reproduces plain sampling byte for byte. Prefixes
//! that are not the trace's own are handled separately:
//!
//! - own reasoning followed by the think-close marker yields a conclusion
//!   that is correct exactly when the first step was good;
//! - any other prefix yields a fresh continuation whose correctness depends
//!   on whether the prefix still states the true answer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::template::THINK_CLOSE;
use super::{BackendError, Embedder, FinishReason, GenerationRequest, GenerationResult, Generator, StepScorer, UsageSource};
use crate::answer::{integer_occurrences, AnswerKind, Question};
use crate::segment::word_tokens;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation profile: {0}")]
    InvalidProfile(String),
}

fn default_concentration() -> f64 {
    0.6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub p_correct_given_good_first: f64,
    pub p_correct_given_bad_first: f64,
    pub p_good_first: f64,
    pub mean_total_tokens: u32,
    /// Total length is drawn uniformly from `mean * (1 ± jitter)`.
    #[serde(default)]
    pub length_jitter: f64,
    /// Share of wrong answers that land on the question's dominant distractor;
    /// the rest spread over twenty others.
    #[serde(default = "default_concentration")]
    pub wrong_answer_concentration: f64,
}

impl SimProfile {
    pub fn new(p_good_correct: f64, p_bad_correct: f64, p_good: f64, mean_total_tokens: u32) -> Self {
        Self {
            p_correct_given_good_first: p_good_correct,
            p_correct_given_bad_first: p_bad_correct,
            p_good_first: p_good,
            mean_total_tokens,
            length_jitter: 0.0,
            wrong_answer_concentration: default_concentration(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [
            ("p_correct_given_good_first", self.p_correct_given_good_first),
            ("p_correct_given_bad_first", self.p_correct_given_bad_first),
            ("p_good_first", self.p_good_first),
            ("wrong_answer_concentration", self.wrong_answer_concentration),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidProfile(format!("{name}={p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return Err(SimError::InvalidProfile(format!("length_jitter={} outside [0, 1)", self.length_jitter)));
        }
        if self.mean_total_tokens == 0 {
            return Err(SimError::InvalidProfile("mean_total_tokens must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SimProfile {
    fn default() -> Self {
        Self::new(0.8, 0.3, 0.5, 12_800)
    }
}

/// How the simulator reacts to reasoning injected from outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResponse {
    pub p_correct_with_answer: f64,
    pub p_correct_without_answer: f64,
    pub continuation_tokens: u32,
}

impl Default for PerturbationResponse {
    fn default() -> Self {
        Self {
            p_correct_with_answer: 0.95,
            p_correct_without_answer: 0.3,
            continuation_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub first_step: String,
    pub first_step_quality: f64,
    pub good_first: bool,
    pub continuation: String,
    pub final_correct: bool,
    pub final_answer: String,
    pub first_step_tokens: u64,
    pub continuation_tokens: u64,
}

const WORDS: [&str; 32] = [
    "we", "let", "the", "sum", "so", "then", "check", "value", "term", "case", "count", "each", "side", "root",
    "gives", "both", "now", "with", "area", "ratio", "power", "mod", "prime", "factor", "bound", "since", "thus",
    "set", "pair", "line", "angle", "step",
];

const DISTRACTORS: u64 = 20;

fn trace_key(question_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"firstprune-sim/v1\0");
    h.update(question_id.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

fn derived_key(base: &[u8; 32], extra: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(base);
    h.update(Sha256::digest(extra));
    h.finalize().into()
}

fn question_hash(question_id: &str) -> u64 {
    let d = Sha256::digest(question_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn distractor(q: &Question, concentration: f64, u_pick: f64, u_which: u64) -> String {
    let h = question_hash(&q.id);
    let index = if u_pick < concentration {
        0
    } else {
        1 + u_which % DISTRACTORS
    };
    match (q.answer_kind, q.answer.parse::<i64>()) {
        (AnswerKind::Integer, Ok(a)) => {
            let offset = if index == 0 {
                1 + (h % 97) as i64
            } else {
                100 + index as i64 * 37
            };
            let mut v = (a + offset).rem_euclid(999);
            if v == a {
                v = (v + 1).rem_euclid(999);
            }
            v.to_string()
        }
        _ => format!("distractor-{index}"),
    }
}

fn conclusion_text(value: &str) -> String {
    format!("\n\nPutting the pieces together, the computation gives result = {value}.\n\nFinal answer: \\boxed{{{value}}}\n")
}

/// Filler text from a dedicated stream, generated left to right so that a
/// shorter request is always a prefix of a longer one.
fn filler(key: &[u8; 32], stream: u64, header: &str, len: usize) -> String {
    let mut rng = ChaCha8Rng::from_seed(*key);
    rng.set_stream(stream);
    let mut out = String::with_capacity(len + 16);
    out.push_str(header);
    let mut left_in_par = 20 + (rng.next_u32() % 40) as usize;
    let mut first = true;
    while out.len() < len {
        let r = rng.next_u32();
        if left_in_par == 0 {
            out.push_str(".\n\n");
            if r % 10 < 3 {
                out.push_str("Alternatively, ");
            }
            left_in_par = 20 + ((r >> 8) % 40) as usize;
            first = true;
            continue;
        }
        if !first {
            out.push(' ');
        }
        out.push_str(WORDS[(r % 32) as usize]);
        first = false;
        left_in_par -= 1;
    }
    out.truncate(len);
    out
}

fn floor_boundary(s: &str, mut at: usize) -> usize {
    at = at.min(s.len());
    while !s.is_char_boundary(at) {
        at -= 1;
    }
    at
}

/// All draws for one (question, seed) pair.
#[derive(Debug, Clone)]
struct TracePlan {
    key: [u8; 32],
    header: String,
    good: bool,
    quality: f64,
    correct: bool,
    final_answer: String,
    first_step_answer: String,
    think_len: usize,
    tail: String,
}

impl TracePlan {
    fn new(profile: &SimProfile, q: &Question, seed: u64) -> Self {
        let key = trace_key(&q.id, seed);
        let mut rng = ChaCha8Rng::from_seed(key);
        let good = rng.gen::<f64>() < profile.p_good_first;
        let band: f64 = rng.gen();
        let quality = if good { 0.5 + 0.5 * band } else { 0.5 * band };
        let p_correct = if good {
            profile.p_correct_given_good_first
        } else {
            profile.p_correct_given_bad_first
        };
        let correct = rng.gen::<f64>() < p_correct;
        let (u_pick, u_which): (f64, u64) = (rng.gen(), rng.gen());
        let final_answer = if correct {
            q.answer.clone()
        } else {
            distractor(q, profile.wrong_answer_concentration, u_pick, u_which)
        };
        let (u_pick1, u_which1): (f64, u64) = (rng.gen(), rng.gen());
        let first_step_answer = if good {
            q.answer.clone()
        } else {
            distractor(q, profile.wrong_answer_concentration, u_pick1, u_which1)
        };
        let jitter = profile.length_jitter * (2.0 * rng.gen::<f64>() - 1.0);
        let header = format!("[sim:{}:{}]\n", hex::encode(q.id.as_bytes()), seed);
        let tail = format!("{THINK_CLOSE}{}", conclusion_text(&final_answer));
        let floor = header.len() + tail.len() + 1;
        let total = ((profile.mean_total_tokens as f64 * (1.0 + jitter)).round() as usize).max(floor);
        Self {
            key,
            header,
            good,
            quality,
            correct,
            final_answer,
            first_step_answer,
            think_len: total - tail.len(),
            tail,
        }
    }

    fn total_len(&self) -> usize {
        self.think_len + self.tail.len()
    }

    /// The first `end` bytes of the canonical trace, cut back to a char boundary.
    fn text(&self, end: usize) -> String {
        let end = end.min(self.total_len());
        if end <= self.think_len {
            return filler(&self.key, 1, &self.header, end);
        }
        let mut out = filler(&self.key, 1, &self.header, self.think_len);
        let cut = floor_boundary(&self.tail, end - self.think_len);
        out.push_str(&self.tail[..cut]);
        out
    }

    fn range(&self, start: usize, end: usize) -> String {
        let full = self.text(end);
        full[floor_boundary(&full, start)..].to_string()
    }

    fn is_own_prefix(&self, prefix: &str) -> bool {
        prefix.len() <= self.total_len() && self.text(prefix.len()) == prefix
    }
}

/// Runs the generator for one (question, seed) pair, splitting the canonical
/// trace after `first_step_len` tokens.
pub fn simulate_trace(profile: &SimProfile, q: &Question, seed: u64, first_step_len: usize) -> Result<SimTrace, SimError> {
    profile.validate()?;
    let plan = TracePlan::new(profile, q, seed);
    let full = plan.text(plan.total_len());
    let cut = floor_boundary(&full, first_step_len);
    Ok(SimTrace {
        first_step: full[..cut].to_string(),
        first_step_quality: plan.quality,
        good_first: plan.good,
        continuation: full[cut..].to_string(),
        final_correct: plan.correct,
        final_answer: plan.final_answer,
        first_step_tokens: cut as u64,
        continuation_tokens: (full.len() - cut) as u64,
    })
}

/// Questions and behaviour shared by the simulated generator and scorers.
#[derive(Debug)]
pub struct SimWorld {
    profile: SimProfile,
    perturbation: PerturbationResponse,
    questions: Vec<Question>,
    by_prompt: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
}

impl SimWorld {
    pub fn new(profile: SimProfile, questions: Vec<Question>) -> Result<Arc<Self>, SimError> {
        Self::with_perturbation(profile, PerturbationResponse::default(), questions)
    }

    pub fn with_perturbation(
        profile: SimProfile,
        perturbation: PerturbationResponse,
        questions: Vec<Question>,
    ) -> Result<Arc<Self>, SimError> {
        profile.validate()?;
        for p in [perturbation.p_correct_with_answer, perturbation.p_correct_without_answer] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidProfile(format!("perturbation probability {p} outside [0, 1]")));
            }
        }
        let by_prompt = questions.iter().enumerate().map(|(i, q)| (q.prompt.clone(), i)).collect();
        let by_id = questions.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
        Ok(Arc::new(Self {
            profile,
            perturbation,
            questions,
            by_prompt,
            by_id,
        }))
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    pub fn question_by_prompt(&self, prompt: &str) -> Option<&Question> {
        self.by_prompt.get(prompt).map(|&i| &self.questions[i])
    }

    pub fn question_by_id(&self, id: &str) -> Option<&Question> {
        self.by_id.get(id).map(|&i| &self.questions[i])
    }

    /// Ground truth for one pair: the canonical trace split after `first_step_len`.
    pub fn trace(&self, question_id: &str, seed: u64, first_step_len: usize) -> Option<SimTrace> {
        let q = self.question_by_id(question_id)?;
        simulate_trace(&self.profile, q, seed, first_step_len).ok()
    }

    /// Recovers (question, seed) from the header of a simulated first step.
    pub fn identify(&self, text: &str) -> Option<(&Question, u64)> {
        let rest = text.strip_prefix("[sim:")?;
        let end = rest.find(']')?;
        let (hex_id, seed) = rest[..end].split_once(':')?;
        let id = String::from_utf8(hex::decode(hex_id).ok()?).ok()?;
        Some((self.question_by_id(&id)?, seed.parse().ok()?))
    }

    /// True first-step quality of a simulated first step.
    pub fn quality_of(&self, first_step: &str) -> Option<f64> {
        let (q, seed) = self.identify(first_step)?;
        Some(TracePlan::new(&self.profile, q, seed).quality)
    }

    fn foreign_outcome(&self, q: &Question, key: &[u8; 32], injected: &str) -> (bool, String, [u8; 32]) {
        let key = derived_key(key, injected.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let states_answer = match q.answer_kind {
            AnswerKind::Integer => !integer_occurrences(injected, &q.answer).is_empty(),
            _ => injected.to_lowercase().contains(&q.answer),
        };
        let p = if states_answer {
            self.perturbation.p_correct_with_answer
        } else {
            self.perturbation.p_correct_without_answer
        };
        let correct = rng.gen::<f64>() < p;
        let answer = if correct {
            q.answer.clone()
        } else {
            distractor(q, self.profile.wrong_answer_concentration, rng.gen(), rng.gen())
        };
        (correct, answer, key)
    }
}

fn truncated(text: String, max_tokens: usize) -> (String, FinishReason) {
    if text.len() > max_tokens {
        let cut = floor_boundary(&text, max_tokens);
        (text[..cut].to_string(), FinishReason::LengthCap)
    } else {
        (text, FinishReason::StopToken)
    }
}

/// Simulated generator over a [`SimWorld`].
#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    world: Arc<SimWorld>,
}

impl SimulatedBackend {
    pub fn new(world: Arc<SimWorld>) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &Arc<SimWorld> {
        &self.world
    }
}

impl Generator for SimulatedBackend {
    fn id(&self) -> String {
        "simulated".into()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request
            .params
            .validate()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let q = self
            .world
            .question_by_prompt(&request.prompt)
            .ok_or_else(|| BackendError::InvalidRequest("prompt does not belong to the simulated dataset".into()))?;
        let plan = TracePlan::new(&self.world.profile, q, request.params.seed);
        let max = request.params.max_tokens as usize;
        let prefix = request.prefix.as_str();

        let (text, finish_reason) = if plan.is_own_prefix(prefix) {
            let end = prefix.len().saturating_add(max);
            let text = plan.range(prefix.len(), end);
            let finish = if end < plan.total_len() {
                FinishReason::LengthCap
            } else {
                FinishReason::StopToken
            };
            (text, finish)
        } else if let Some(at) = prefix.find(THINK_CLOSE) {
            let think = &prefix[..at];
            let answer = if plan.is_own_prefix(think) && think.len() <= plan.think_len {
                plan.first_step_answer.clone()
            } else {
                self.world.foreign_outcome(q, &plan.key, think).1
            };
            truncated(conclusion_text(&answer), max)
        } else {
            let (_, answer, key) = self.world.foreign_outcome(q, &plan.key, prefix);
            let body_len = self.world.perturbation.continuation_tokens as usize;
            let mut text = filler(&key, 1, " ", body_len);
            text.push_str(THINK_CLOSE);
            text.push_str(&conclusion_text(&answer));
            truncated(text, max)
        };

        Ok(GenerationResult {
            usage_prompt_tokens: (request.prompt.len() + prefix.len()) as u64,
            usage_completion_tokens: text.len() as u64,
            text,
            finish_reason,
            usage_source: UsageSource::BackendReported,
        })
    }
}

/// Reward scorer that returns the simulator's true first-step quality.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    world: Arc<SimWorld>,
}

impl OracleScorer {
    pub fn new(world: Arc<SimWorld>) -> Self {
        Self { world }
    }
}

impl StepScorer for OracleScorer {
    fn id(&self) -> String {
        "sim-oracle".into()
    }

    fn score_steps(&self, _prompt: &str, steps: &[String]) -> Result<Vec<f64>, BackendError> {
        let text = steps.join(super::PRM_STEP_DELIMITER);
        let quality = self
            .world
            .quality_of(&text)
            .ok_or_else(|| BackendError::InvalidRequest("first step was not produced by the simulator".into()))?;
        Ok(vec![quality; steps.len()])
    }
}

/// Scorer that ignores its input; every candidate ties.
#[derive(Debug, Clone, Default)]
pub struct ConstantScorer(pub f64);

impl StepScorer for ConstantScorer {
    fn id(&self) -> String {
        "constant".into()
    }

    fn score_steps(&self, _prompt: &str, steps: &[String]) -> Result<Vec<f64>, BackendError> {
        Ok(vec![self.0; steps.len()])
    }
}

/// Feature-hashing bag-of-words embedder, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-{}", self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for tok in word_tokens(t) {
                    let d = Sha256::digest(tok.as_bytes());
                    let h = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[(h % self.dim as u64) as usize] += sign;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                } else {
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

/// Generator wrapper that counts calls and can fail after a fixed number.
pub struct CallCounter<G> {
    inner: G,
    calls: AtomicU64,
    fail_after: Option<u64>,
    seen: Mutex<HashMap<(String, String, u64, u32), u64>>,
}

impl<G> CallCounter<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            fail_after: None,
            seen: Mutex::new(HashMap::new()),
        }
    }

    /// Every call after the first `n` fails with a transport error.
    pub fn failing_after(mut self, n: u64) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Calls whose exact request had already been served before.
    pub fn duplicate_calls(&self) -> u64 {
        self.seen.lock().expect("seen lock").values().map(|c| c - 1).sum()
    }
}

impl<G: Generator> Generator for CallCounter<G> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(BackendError::Transport("simulated outage".into()));
        }
        let key = (
            request.prompt.clone(),
            request.prefix.clone(),
            request.params.seed,
            request.params.max_tokens,
        );
        *self.seen.lock().expect("seen lock").entry(key).or_insert(0) += 1;
        self.inner.generate(request)
    }

    fn think_close(&self) -> &str {
        self.inner.think_close()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::{extract_prediction, DecodingParams};
    use crate::backend::StopCondition;

    fn question(i: usize) -> Question {
        Question::new(format!("q{i}"), format!("Problem {i}: compute it."), format!("{}", 100 + i), AnswerKind::Integer)
    }

    fn request(q: &Question, prefix: &str, seed: u64, max_tokens: u32) -> GenerationRequest {
        GenerationRequest {
            prompt: q.prompt.clone(),
            prefix: prefix.to_string(),
            params: DecodingParams::default().with_seed(seed).with_max_tokens(max_tokens),
            stop_condition: StopCondition::ThinkCloseThenConclude,
        }
    }

    fn backend(profile: SimProfile, n: usize) -> (SimulatedBackend, Vec<Question>) {
        let qs: Vec<Question> = (0..n).map(question).collect();
        (SimulatedBackend::new(SimWorld::new(profile, qs.clone()).unwrap()), qs)
    }

    #[test]
    fn same_seed_same_bytes() {
        let (b, qs) = backend(SimProfile::new(0.8, 0.3, 0.5, 2000), 1);
        let a = b.generate(&request(&qs[0], "", 7, 32768)).unwrap();
        let c = b.generate(&request(&qs[0], "", 7, 32768)).unwrap();
        assert_eq!(a, c);
        let d = b.generate(&request(&qs[0], "", 8, 32768)).unwrap();
        assert_ne!(a.text, d.text);
    }

    #[test]
    fn cap_binds_and_is_reported() {
        let (b, qs) = backend(SimProfile::new(0.8, 0.3, 0.5, 2000), 1);
        let r = b.generate(&request(&qs[0], "", 3, 512)).unwrap();
        assert!(r.usage_completion_tokens <= 512);
        assert_eq!(r.usage_completion_tokens, r.text.len() as u64);
        assert_eq!(r.finish_reason, FinishReason::LengthCap);
    }

    #[test]
    fn resuming_reproduces_plain_sampling() {
        let (b, qs) = backend(SimProfile::new(0.8, 0.3, 0.5, 3000), 1);
        let full = b.generate(&request(&qs[0], "", 11, 32768)).unwrap();
        assert_eq!(full.finish_reason, FinishReason::StopToken);
        let head = b.generate(&request(&qs[0], "", 11, 512)).unwrap();
        let tail = b.generate(&request(&qs[0], &head.text, 11, 32768 - 512)).unwrap();
        assert_eq!(format!("{}{}", head.text, tail.text), full.text);
    }

    #[test]
    fn conclusion_is_boxed_iff_correct() {
        let profile = SimProfile::new(0.8, 0.3, 0.5, 1500);
        for i in 0..20 {
            let q = question(i);
            for seed in 0..10 {
                let t = simulate_trace(&profile, &q, seed, 512).unwrap();
                let text = format!("{}{}", t.first_step, t.continuation);
                let (_, conclusion) = text.split_once(THINK_CLOSE).unwrap();
                let p = extract_prediction(conclusion, AnswerKind::Integer);
                assert!(p.present);
                assert_eq!(p.canonical == q.answer, t.final_correct);
                assert_eq!(t.first_step_tokens, 512);
                assert_eq!(t.first_step_tokens + t.continuation_tokens, 1500);
                assert_eq!(t.good_first, t.first_step_quality >= 0.5);
            }
        }
    }

    #[test]
    fn conditional_correctness_matches_profile() {
        let profile = SimProfile::new(0.8, 0.3, 0.5, 200);
        let qs: Vec<Question> = (0..100).map(question).collect();
        let (mut good, mut good_correct, mut bad, mut bad_correct) = (0u32, 0u32, 0u32, 0u32);
        for q in &qs {
            for seed in 0..100 {
                let t = simulate_trace(&profile, q, seed, 16).unwrap();
                if t.good_first {
                    good += 1;
                    good_correct += t.final_correct as u32;
                } else {
                    bad += 1;
                    bad_correct += t.final_correct as u32;
                }
            }
        }
        let pg = good_correct as f64 / good as f64;
        let pb = bad_correct as f64 / bad as f64;
        assert!((pg - 0.8).abs() < 0.02, "P(correct|good) = {pg}");
        assert!((pb - 0.3).abs() < 0.02, "P(correct|bad) = {pb}");
        assert!(pg - pb > 0.4);
    }

    #[test]
    fn degenerate_profile_is_always_correct() {
        let profile = SimProfile::new(1.0, 0.0, 1.0, 300);
        for seed in 0..200 {
            assert!(simulate_trace(&profile, &question(1), seed, 64).unwrap().final_correct);
        }
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = SimProfile::new(1.2, 0.3, 0.5, 100);
        assert!(matches!(simulate_trace(&p, &question(0), 0, 8), Err(SimError::InvalidProfile(_))));
        p = SimProfile::new(0.8, -0.1, 0.5, 100);
        assert!(p.validate().is_err());
        p = SimProfile::new(0.8, 0.3, 0.5, 0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn forced_conclusion_follows_first_step_quality() {
        let (b, qs) = backend(SimProfile::new(0.8, 0.3, 0.5, 2000), 5);
        for q in &qs {
            for seed in 0..20 {
                let head = b.generate(&request(q, "", seed, 300)).unwrap();
                let prefix = format!("{}{}", head.text, THINK_CLOSE);
                let c = b.generate(&request(q, &prefix, seed, 4096)).unwrap();
                let p = extract_prediction(&c.text, AnswerKind::Integer);
                let good = b.world().quality_of(&head.text).unwrap() >= 0.5;
                assert_eq!(p.canonical == q.answer, good);
            }
        }
    }

    #[test]
    fn oracle_scorer_reads_quality() {
        let profile = SimProfile::new(0.8, 0.3, 0.5, 2000);
        let (b, qs) = backend(profile, 2);
        let scorer = OracleScorer::new(b.world().clone());
        let t = simulate_trace(&profile, &qs[1], 5, 512).unwrap();
        let r = crate::backend::score_first_step(&scorer, &qs[1].prompt, &t.first_step).unwrap();
        assert_eq!(r.value, t.first_step_quality);
        assert!(scorer.score_steps("p", &["no header".into()]).is_err());
    }

    #[test]
    fn unknown_prompt_is_rejected() {
        let (b, qs) = backend(SimProfile::default(), 1);
        let mut r = request(&qs[0], "", 0, 10);
        r.prompt = "other".into();
        assert!(matches!(b.generate(&r), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_normalized() {
        let e = HashingEmbedder::new(32);
        let v = e.embed_batch(&["alpha beta".into(), "alpha beta".into(), "".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        let n: f64 = v[0].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(v[2][0], 1.0);
    }

    #[test]
    fn call_counter_tracks_duplicates_and_outages() {
        let (b, qs) = backend(SimProfile::new(0.8, 0.3, 0.5, 500), 1);
        let c = CallCounter::new(b).failing_after(3);
        let r = request(&qs[0], "", 1, 100);
        c.generate(&r).unwrap();
        c.generate(&r).unwrap();
        assert_eq!(c.duplicate_calls(), 1);
        c.generate(&request(&qs[0], "", 2, 100)).unwrap();
        assert!(c.generate(&r).is_err());
        assert_eq!(c.calls(), 4);
    }
}
