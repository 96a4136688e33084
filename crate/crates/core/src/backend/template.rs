//! Chat templates used by raw-completion adapters.

use serde::{Deserialize, Serialize};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Renders a user query into the model's raw prompt, ending with an open
/// think block so that prefixes continue the reasoning directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    #[default]
    DeepseekR1,
    Qwen3,
    /// Query followed by the think marker, nothing else.
    Plain,
}

const BOXED_INSTRUCTION: &str = "Please reason step by step, and put your final answer within \\boxed{}.";

impl PromptTemplate {
    pub fn render(&self, query: &str) -> String {
        match self {
            PromptTemplate::DeepseekR1 => format!(
                "<｜begin▁of▁sentence｜>{BOXED_INSTRUCTION}\n\n<｜User｜>{query}<｜Assistant｜>{THINK_OPEN}\n"
            ),
            PromptTemplate::Qwen3 => format!(
                "<|im_start|>user\n{query}\n{BOXED_INSTRUCTION}<|im_end|>\n<|im_start|>assistant\n{THINK_OPEN}\n"
            ),
            PromptTemplate::Plain => format!("{query}\n{THINK_OPEN}\n"),
        }
    }

    pub fn think_close(&self) -> &'static str {
        THINK_CLOSE
    }
}

/// Splits generated text at the first think-close marker into the reasoning
/// part and the conclusion. Without a marker the conclusion is `None`.
pub fn split_conclusion<'a>(text: &'a str, close: &str) -> (&'a str, Option<&'a str>) {
    match text.find(close) {
        Some(at) => (&text[..at], Some(&text[at + close.len()..])),
        None => (text, None),
    }
}
