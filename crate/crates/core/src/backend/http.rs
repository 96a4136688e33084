//! HTTP clients for raw-completion generation, step scoring and embeddings.
//!
//! Generation speaks the OpenAI-compatible `/v1/completions` contract so that
//! a partially generated think block can be resumed verbatim. The scoring
//! and embedding contracts are minimal JSON endpoints:
//!
//! - scoring: `{"prompt": str, "steps": [str]}` -> `{"scores": [number]}`
//! - embedding: `{"texts": [str]}` -> `{"vectors": [[number]]}`

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::template::PromptTemplate;
use super::{
    BackendError, Embedder, FinishReason, GenerationRequest, GenerationResult, Generator, RetryPolicy, StepScorer,
    UsageSource,
};
use crate::answer::approximate_token_count;

fn default_timeout() -> u64 {
    600
}

fn default_in_flight() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            model: None,
            api_key: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }
}

impl EndpointConfig {
    pub fn with_url(url: impl Into<String>) -> Self {
        Self {
            url: Some(url.into()),
            ..Self::default()
        }
    }

    /// Fills the URL and key from environment variables when the config
    /// leaves them unset. Values from the config file always win.
    pub fn fill_from_env(&mut self, url_var: &str, key_var: &str) {
        if self.url.is_none() {
            self.url = std::env::var(url_var).ok().filter(|v| !v.is_empty());
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(key_var).ok().filter(|v| !v.is_empty());
        }
    }

    fn require_url(&self) -> Result<&str, BackendError> {
        self.url
            .as_deref()
            .ok_or_else(|| BackendError::InvalidRequest("endpoint url is not configured".into()))
    }
}

struct JsonClient {
    http: Client,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    fn new(cfg: &EndpointConfig, url: String) -> Result<Self, BackendError> {
        let http = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            http,
            url,
            api_key: cfg.api_key.clone(),
            retry: cfg.retry,
        })
    }

    fn post<T: DeserializeOwned>(&self, body: &serde_json::Value) -> Result<T, BackendError> {
        self.retry.run(|| self.post_once(body))
    }

    fn post_once<T: DeserializeOwned>(&self, body: &serde_json::Value) -> Result<T, BackendError> {
        let mut req = self.http.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(BackendError::Transport(format!("{status}: {text}")));
        }
        if !status.is_success() {
            let lower = text.to_lowercase();
            if lower.contains("context") && (lower.contains("length") || lower.contains("maximum")) {
                return Err(BackendError::ContextOverflow(text));
            }
            return Err(BackendError::InvalidRequest(format!("{status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(format!("{e}: {text}")))
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<CompletionUsage>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CompletionUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// OpenAI-compatible raw completions client.
pub struct CompletionsClient {
    client: JsonClient,
    model: String,
    template: PromptTemplate,
    supports_min_p: bool,
    warned_min_p: AtomicBool,
}

impl CompletionsClient {
    pub fn new(cfg: &EndpointConfig, template: PromptTemplate, supports_min_p: bool) -> Result<Self, BackendError> {
        let base = cfg.require_url()?.trim_end_matches('/');
        let url = if base.ends_with("/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/completions")
        };
        Ok(Self {
            client: JsonClient::new(cfg, url)?,
            model: cfg.model.clone().unwrap_or_else(|| "default".into()),
            template,
            supports_min_p,
            warned_min_p: AtomicBool::new(false),
        })
    }

    fn body(&self, request: &GenerationRequest) -> serde_json::Value {
        let p = &request.params;
        let prompt = format!("{}{}", self.template.render(&request.prompt), request.prefix);
        let mut body = json!({
            "model": self.model,
            "prompt": prompt,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "max_tokens": p.max_tokens,
            "seed": p.seed,
        });
        if self.supports_min_p {
            body["min_p"] = json!(p.min_p);
        } else if p.min_p > 0.0 && !self.warned_min_p.swap(true, Ordering::Relaxed) {
            tracing::warn!(model = %self.model, "backend does not support min_p; omitting it for this run");
        }
        body
    }
}

impl Generator for CompletionsClient {
    fn id(&self) -> String {
        format!("completions:{}@{}", self.model, self.client.url)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request
            .params
            .validate()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let body = self.body(request);
        let resp: CompletionResponse = self.client.post(&body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::LengthCap,
            Some(_) | None => FinishReason::StopToken,
        };
        let (prompt_tokens, completion_tokens, usage_source) = match resp.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens, UsageSource::BackendReported),
            None => (
                approximate_token_count(body["prompt"].as_str().unwrap_or_default()),
                approximate_token_count(&choice.text),
                UsageSource::Approximate,
            ),
        };
        Ok(GenerationResult {
            text: choice.text,
            finish_reason,
            usage_prompt_tokens: prompt_tokens,
            usage_completion_tokens: completion_tokens,
            usage_source,
        })
    }
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Client for a step-scoring endpoint fronting a process reward model.
pub struct RewardClient {
    client: JsonClient,
    scorer_id: String,
}

impl RewardClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, BackendError> {
        let url = cfg.require_url()?.to_string();
        let scorer_id = cfg.model.clone().unwrap_or_else(|| url.clone());
        Ok(Self {
            client: JsonClient::new(cfg, url)?,
            scorer_id,
        })
    }
}

impl StepScorer for RewardClient {
    fn id(&self) -> String {
        self.scorer_id.clone()
    }

    fn score_steps(&self, prompt: &str, steps: &[String]) -> Result<Vec<f64>, BackendError> {
        let resp: ScoreResponse = self.client.post(&json!({ "prompt": prompt, "steps": steps }))?;
        if resp.scores.len() != steps.len() {
            return Err(BackendError::MalformedResponse(format!(
                "{} scores for {} steps",
                resp.scores.len(),
                steps.len()
            )));
        }
        Ok(resp.scores)
    }
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

pub struct EmbedClient {
    client: JsonClient,
    id: String,
}

impl EmbedClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, BackendError> {
        let url = cfg.require_url()?.to_string();
        let id = cfg.model.clone().unwrap_or_else(|| url.clone());
        Ok(Self {
            client: JsonClient::new(cfg, url)?,
            id,
        })
    }
}

impl Embedder for EmbedClient {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let resp: EmbedResponse = self.client.post(&json!({ "texts": texts }))?;
        Ok(resp.vectors)
    }
}
