//! Questions, predictions and answer handling.
//!
//! Everything here is pure. Predictions are pulled out of a conclusion by
//! scanning for the last balanced `\boxed{...}` group and then canonicalized
//! according to the question's [`AnswerKind`].

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("answers of kind external_verdict are judged externally and cannot be compared")]
    KindMismatch,
    #[error("dataset line {line}: {message}")]
    InvalidDataset { line: usize, message: String },
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
    #[error("invalid decoding parameters: {0}")]
    InvalidDecoding(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Integer,
    Freeform,
    ExternalVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub answer: String,
    pub answer_kind: AnswerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_tag: Option<String>,
}

impl Question {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, answer: impl Into<String>, kind: AnswerKind) -> Self {
        let answer = answer.into();
        Self {
            id: id.into(),
            prompt: prompt.into(),
            answer: canonicalize_answer(&answer, kind),
            answer_kind: kind,
            benchmark_tag: None,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.benchmark_tag = Some(tag.into());
        self
    }

    /// The benchmark tag, or `"default"` for untagged questions.
    pub fn tag(&self) -> &str {
        self.benchmark_tag.as_deref().unwrap_or("default")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Prediction {
    pub raw: String,
    pub canonical: String,
    pub present: bool,
}

impl Prediction {
    pub fn absent() -> Self {
        Self::default()
    }

    pub fn from_raw(raw: &str, kind: AnswerKind) -> Self {
        let canonical = canonicalize_answer(raw, kind);
        let present = !canonical.is_empty();
        Self {
            raw: raw.to_string(),
            canonical,
            present,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub min_p: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            min_p: 0.05,
            max_tokens: 32768,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: &str| Err(DomainError::InvalidDecoding(m.to_string()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a finite value >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.min_p) {
            return bad("min_p must lie in [0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

const BOXED_OPEN: &str = "\\boxed{";

/// Byte span of one balanced `\boxed{...}` group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxedSpan {
    /// Offset of the backslash.
    pub start: usize,
    /// Offset one past the closing brace.
    pub end: usize,
    /// Offsets of the group's content, braces excluded.
    pub content: (usize, usize),
}

/// Finds the outermost balanced `\boxed{...}` groups in order of appearance.
///
/// Escaped braces (`\{`, `\}`) do not count towards nesting. An opening
/// without a matching close is skipped.
pub fn boxed_spans(text: &str) -> Vec<BoxedSpan> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(BOXED_OPEN) {
        let start = from + rel;
        let body = start + BOXED_OPEN.len();
        let mut depth = 1usize;
        let mut i = body;
        let mut close = None;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => {
                    i += 2;
                    continue;
                }
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
            i += 1;
        }
        match close {
            Some(c) => {
                spans.push(BoxedSpan {
                    start,
                    end: c + 1,
                    content: (body, c),
                });
                from = c + 1;
            }
            None => from = body,
        }
    }
    spans
}

/// Extracts the last balanced `\boxed{...}` group of a conclusion.
pub fn extract_prediction(conclusion: &str, kind: AnswerKind) -> Prediction {
    match boxed_spans(conclusion).last() {
        Some(span) => Prediction::from_raw(&conclusion[span.content.0..span.content.1], kind),
        None => Prediction::absent(),
    }
}

/// Total normalization of a raw answer string.
///
/// Integer answers lose whitespace, `$` signs and leading zeros; anything that
/// is not an integer afterwards canonicalizes to the empty string. Freeform
/// answers are trimmed, whitespace-collapsed and lowercased.
pub fn canonicalize_answer(raw: &str, kind: AnswerKind) -> String {
    match kind {
        AnswerKind::Integer => canonical_integer(raw).unwrap_or_default(),
        AnswerKind::Freeform | AnswerKind::ExternalVerdict => raw
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase(),
    }
}

fn canonical_integer(raw: &str) -> Option<String> {
    let cleaned: String = raw
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '$')
        .collect();
    let (negative, digits) = match cleaned.as_bytes().first()? {
        b'-' => (true, &cleaned[1..]),
        b'+' => (false, &cleaned[1..]),
        _ => (false, cleaned.as_str()),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        return Some("0".to_string());
    }
    Some(if negative {
        format!("-{trimmed}")
    } else {
        trimmed.to_string()
    })
}

/// Compares a prediction against the question's ground truth in canonical space.
pub fn answers_equal(pred: &Prediction, q: &Question) -> Result<bool, DomainError> {
    if q.answer_kind == AnswerKind::ExternalVerdict {
        return Err(DomainError::KindMismatch);
    }
    if !pred.present {
        return Ok(false);
    }
    Ok(pred.canonical == canonicalize_answer(&q.answer, q.answer_kind))
}

/// Offline token estimate: one token per four bytes, rounded up.
pub fn approximate_token_count(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Loads a newline-delimited JSON dataset, canonicalizing every answer.
pub fn load_questions(path: &Path) -> Result<Vec<Question>, DomainError> {
    let body = fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_questions(&body)
}

pub fn parse_questions(body: &str) -> Result<Vec<Question>, DomainError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut q: Question = serde_json::from_str(line).map_err(|e| DomainError::InvalidDataset {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let canonical = canonicalize_answer(&q.answer, q.answer_kind);
        if q.answer_kind == AnswerKind::Integer {
            let Ok(value) = canonical.parse::<i64>() else {
                return Err(DomainError::InvalidDataset {
                    line: idx + 1,
                    message: format!("answer `{}` is not an integer", q.answer),
                });
            };
            if !(0..999).contains(&value) {
                tracing::warn!(id = %q.id, value, "integer answer outside [0, 999)");
            }
        }
        q.answer = canonical;
        if !seen.insert(q.id.clone()) {
            return Err(DomainError::DuplicateId(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

/// Standalone occurrences of an integer literal: digit runs equal to `value`
/// that are not part of a longer number or a decimal.
pub fn integer_occurrences(text: &str, value: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    if value.is_empty() {
        return out;
    }
    let (neg, digits) = match value.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, value),
    };
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let end = i;
        if &text[start..end] != digits {
            continue;
        }
        let decimal_before = start >= 2 && bytes[start - 1] == b'.' && bytes[start - 2].is_ascii_digit();
        let decimal_after = end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit();
        if decimal_before || decimal_after {
            continue;
        }
        let has_minus = start >= 1 && bytes[start - 1] == b'-';
        match (neg, has_minus) {
            (true, true) => out.push((start - 1, end)),
            (false, false) => out.push((start, end)),
            _ => {}
        }
    }
    out
}
