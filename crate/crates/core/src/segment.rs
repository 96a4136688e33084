//! Keyword-based reasoning-step segmentation and removal of question
//! restatements at the start of a trace.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::Question;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("cannot segment an empty trace")]
    EmptyTrace,
    #[error("keyword profile `{0}` has no keywords or a keyword that is not lowercase")]
    InvalidProfile(String),
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),
    #[error("keyword profile table is malformed: {0}")]
    MalformedTable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordProfile {
    pub model_family: String,
    pub keywords: Vec<String>,
}

impl KeywordProfile {
    pub fn new(model_family: impl Into<String>, keywords: &[&str]) -> Result<Self, SegmentError> {
        let profile = Self {
            model_family: model_family.into(),
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        let ok = !self.keywords.is_empty()
            && self
                .keywords
                .iter()
                .all(|k| !k.trim().is_empty() && *k == k.to_lowercase());
        if ok {
            Ok(())
        } else {
            Err(SegmentError::InvalidProfile(self.model_family.clone()))
        }
    }
}

const DEFAULT_PROFILES: &str = include_str!("../data/keyword_profiles.json");

/// Keyword profiles keyed by model family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileTable(pub BTreeMap<String, Vec<String>>);

impl ProfileTable {
    /// The shipped table.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_PROFILES).expect("shipped keyword table parses")
    }

    pub fn from_json(body: &str) -> Result<Self, SegmentError> {
        let table: Self = serde_json::from_str(body).map_err(|e| SegmentError::MalformedTable(e.to_string()))?;
        for family in table.0.keys() {
            table.get(family)?;
        }
        Ok(table)
    }

    /// Layers `overrides` on top of this table, replacing whole entries.
    pub fn merged(mut self, overrides: &BTreeMap<String, Vec<String>>) -> Self {
        for (k, v) in overrides {
            self.0.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn get(&self, family: &str) -> Result<KeywordProfile, SegmentError> {
        let keywords = self
            .0
            .get(family)
            .ok_or_else(|| SegmentError::UnknownFamily(family.to_string()))?;
        let profile = KeywordProfile {
            model_family: family.to_string(),
            keywords: keywords.clone(),
        };
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSegmentation {
    pub steps: Vec<String>,
    pub offsets: Vec<(usize, usize)>,
    pub keyword_set: Vec<String>,
}

impl StepSegmentation {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

fn matches_word_at(bytes: &[u8], at: usize, word: &[u8]) -> bool {
    let end = at + word.len();
    if end > bytes.len() || !bytes[at..end].eq_ignore_ascii_case(word) {
        return false;
    }
    let left_ok = at == 0 || !is_word_byte(bytes[at - 1]);
    let right_ok = end == bytes.len() || !is_word_byte(bytes[end]);
    left_ok && right_ok
}

/// Whether `at` opens a sentence or paragraph: only whitespace back to the
/// start of text, or back to a newline or terminal punctuation.
fn is_sentence_initial(bytes: &[u8], at: usize) -> bool {
    let mut i = at;
    while i > 0 {
        let b = bytes[i - 1];
        if b == b'\n' {
            return true;
        }
        if b.is_ascii_whitespace() {
            i -= 1;
            continue;
        }
        return matches!(b, b'.' | b'!' | b'?');
    }
    true
}

/// Byte offsets (excluding 0) where a new step begins.
fn boundaries(trace: &str, keywords: &[String]) -> Vec<usize> {
    let bytes = trace.as_bytes();
    let mut cuts = Vec::new();
    for at in 1..bytes.len() {
        if is_word_byte(bytes[at - 1]) || !trace.is_char_boundary(at) {
            continue;
        }
        let hit = keywords
            .iter()
            .any(|k| matches_word_at(bytes, at, k.as_bytes()));
        if hit && is_sentence_initial(bytes, at) {
            cuts.push(at);
        }
    }
    cuts
}

/// Splits a trace before every sentence-initial switch keyword.
pub fn segment_steps(trace: &str, profile: &KeywordProfile) -> Result<StepSegmentation, SegmentError> {
    if trace.is_empty() {
        return Err(SegmentError::EmptyTrace);
    }
    profile.validate()?;
    let mut edges = vec![0];
    edges.extend(boundaries(trace, &profile.keywords));
    edges.push(trace.len());
    let offsets: Vec<(usize, usize)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
    Ok(StepSegmentation {
        steps: offsets.iter().map(|&(s, e)| trace[s..e].to_string()).collect(),
        offsets,
        keyword_set: profile.keywords.clone(),
    })
}

/// Average per-trace frequency of each marker, counting every whole-word,
/// case-insensitive occurrence.
pub fn keyword_frequencies<'a>(traces: impl IntoIterator<Item = &'a str>, markers: &[String]) -> Vec<(String, f64)> {
    let mut totals = vec![0u64; markers.len()];
    let mut n = 0u64;
    for trace in traces {
        n += 1;
        let bytes = trace.as_bytes();
        for (slot, marker) in totals.iter_mut().zip(markers) {
            let m = marker.to_lowercase();
            *slot += (0..bytes.len())
                .filter(|&i| trace.is_char_boundary(i) && matches_word_at(bytes, i, m.as_bytes()))
                .count() as u64;
        }
    }
    markers
        .iter()
        .zip(totals)
        .map(|(m, t)| (m.clone(), if n == 0 { 0.0 } else { t as f64 / n as f64 }))
        .collect()
}

/// Markers counted by default when profiling a new model family.
pub const DEFAULT_MARKERS: [&str; 7] = [
    "but",
    "wait",
    "alternatively",
    "hmm",
    "hold on",
    "let me confirm",
    "however",
];

pub const OVERLAP_NGRAM: usize = 8;
pub const OVERLAP_THRESHOLD: f64 = 0.6;
pub const OVERLAP_MAX_FRACTION: f64 = 0.25;

/// Sentence spans in order. Each span runs through its terminator and any
/// trailing whitespace, so spans tile the text. Line breaks and `.`, `!`,
/// `?` followed by whitespace end a sentence.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let terminal = b == b'\n'
            || (matches!(b, b'.' | b'!' | b'?') && (i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace()));
        i += 1;
        if terminal {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            spans.push((start, i));
            start = i;
        }
    }
    if start < bytes.len() {
        spans.push((start, bytes.len()));
    }
    spans
}

pub(crate) fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Fraction of the sentence's token n-grams that also occur in the reference.
/// Sentences shorter than `n` tokens have no n-grams and score 0.
pub fn ngram_overlap(sentence: &str, reference: &HashSet<Vec<String>>, n: usize) -> f64 {
    let toks = word_tokens(sentence);
    if toks.len() < n {
        return 0.0;
    }
    let windows: Vec<&[String]> = toks.windows(n).collect();
    let hits = windows.iter().filter(|w| reference.contains(&w.to_vec())).count();
    hits as f64 / windows.len() as f64
}

pub(crate) fn ngram_set(text: &str, n: usize) -> HashSet<Vec<String>> {
    word_tokens(text).windows(n).map(|w| w.to_vec()).collect()
}

/// Drops leading sentences that restate the question.
///
/// Sentences are consumed from the start while each one's 8-gram overlap
/// with the prompt exceeds 0.6, never past the first quarter of the trace.
pub fn strip_question_overlap<'a>(trace: &'a str, q: &Question) -> &'a str {
    let reference = ngram_set(&q.prompt, OVERLAP_NGRAM);
    if reference.is_empty() {
        return trace;
    }
    let cap = (trace.len() as f64 * OVERLAP_MAX_FRACTION).floor() as usize;
    let mut cut = 0;
    for (start, end) in sentence_spans(trace) {
        if end > cap {
            break;
        }
        if ngram_overlap(&trace[start..end], &reference, OVERLAP_NGRAM) > OVERLAP_THRESHOLD {
            cut = end;
        } else {
            break;
        }
    }
    &trace[cut..]
}
