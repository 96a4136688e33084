//! Run configuration file, run identity, and backend construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::PerturbSettings;
use crate::answer::Question;
use crate::backend::http::{CompletionsClient, EmbedClient, EndpointConfig, RewardClient};
use crate::backend::sim::{
    ConstantScorer, HashingEmbedder, OracleScorer, PerturbationResponse, SimProfile, SimWorld, SimulatedBackend,
};
use crate::backend::template::PromptTemplate;
use crate::backend::{BackendError, Embedder, Generator, Limited, StepScorer};
use crate::engine::ExperimentConfig;
use crate::metrics::MajMode;
use crate::segment::{KeywordProfile, ProfileTable, SegmentError};
use crate::store::{unix_now, RunManifest};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Sim,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" | "simulated" => Ok(BackendKind::Sim),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend {other:?} (expected sim or http)")),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default = "yes")]
    pub supports_min_p: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            endpoint: EndpointConfig::default(),
            template: PromptTemplate::default(),
            supports_min_p: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimScorerKind {
    /// Returns the simulator's true first-step quality.
    #[default]
    Oracle,
    /// Scores every step equally, so selection falls back to seed order.
    Constant,
}

fn default_embedding_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(default)]
    pub profile: SimProfile,
    #[serde(default)]
    pub perturbation: PerturbationResponse,
    #[serde(default)]
    pub scorer: SimScorerKind,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            profile: SimProfile::default(),
            perturbation: PerturbationResponse::default(),
            scorer: SimScorerKind::default(),
            embedding_dim: default_embedding_dim(),
        }
    }
}

fn default_family() -> String {
    "deepseek-r1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    #[serde(default = "default_family")]
    pub model_family: String,
    /// Extra or replacement keyword lists, keyed by model family.
    #[serde(default)]
    pub keyword_overrides: BTreeMap<String, Vec<String>>,
    /// Replaces the built-in profile table.
    #[serde(default)]
    pub profile_table: Option<PathBuf>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            model_family: default_family(),
            keyword_overrides: BTreeMap::new(),
            profile_table: None,
        }
    }
}

impl SegmentationConfig {
    pub fn profile(&self) -> Result<KeywordProfile, ConfigError> {
        let table = match &self.profile_table {
            Some(path) => {
                let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                ProfileTable::from_json(&body)?
            }
            None => ProfileTable::builtin(),
        };
        Ok(table.merged(&self.keyword_overrides).get(&self.model_family)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub perturb: PerturbSettings,
}

fn default_m_values() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64]
}

fn default_baseline_mode() -> MajMode {
    MajMode::SubsetMean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(default = "default_m_values")]
    pub m_values: Vec<usize>,
    /// How plain-sampling maj@K is computed for K below N.
    #[serde(default = "default_baseline_mode")]
    pub baseline_mode: MajMode,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            m_values: default_m_values(),
            baseline_mode: default_baseline_mode(),
        }
    }
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub reward: EndpointConfig,
    #[serde(default)]
    pub embedding: EndpointConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            backend: BackendKind::default(),
            generator: GeneratorConfig::default(),
            reward: EndpointConfig::default(),
            embedding: EndpointConfig::default(),
            simulation: SimulationConfig::default(),
            segmentation: SegmentationConfig::default(),
            analysis: AnalysisConfig::default(),
            report: ReportConfig::default(),
            workers: default_workers(),
            out_dir: None,
        }
    }
}

pub const ENV_PREFIX: &str = "FIRSTPRUNE";

impl RunConfig {
    pub fn from_json(body: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(body).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&body, path)
    }

    /// Fills endpoint URLs and keys left unset in the file from
    /// `FIRSTPRUNE_{GENERATOR,REWARD,EMBED}_{URL,API_KEY}`.
    pub fn apply_env(&mut self) {
        for (role, ep) in [
            ("GENERATOR", &mut self.generator.endpoint),
            ("REWARD", &mut self.reward),
            ("EMBED", &mut self.embedding),
        ] {
            ep.fill_from_env(&format!("{ENV_PREFIX}_{role}_URL"), &format!("{ENV_PREFIX}_{role}_API_KEY"));
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.simulation
            .profile
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.analysis.perturb.trials == 0 {
            return Err(ConfigError::Invalid("analysis.perturb.trials must be at least 1".into()));
        }
        if self.backend == BackendKind::Http && self.generator.endpoint.url.is_none() {
            return Err(ConfigError::Invalid(format!(
                "http backend needs generator.url or {ENV_PREFIX}_GENERATOR_URL"
            )));
        }
        self.segmentation.profile()?;
        Ok(())
    }

    /// The configuration fields that determine results. Worker counts,
    /// output paths, timeouts, retry and in-flight limits, credentials and
    /// report settings are left out.
    pub fn identity(&self) -> Value {
        let ep = |e: &EndpointConfig| serde_json::json!({ "url": e.url, "model": e.model });
        let mut v = serde_json::json!({
            "experiment": self.experiment,
            "backend": self.backend,
            "segmentation": {
                "model_family": self.segmentation.model_family,
                "keywords": self.segmentation.profile().map(|p| p.keywords).unwrap_or_default(),
            },
            "perturb": self.analysis.perturb,
        });
        match self.backend {
            BackendKind::Sim => v["simulation"] = serde_json::to_value(&self.simulation).unwrap_or(Value::Null),
            BackendKind::Http => {
                v["generator"] = serde_json::json!({
                    "endpoint": ep(&self.generator.endpoint),
                    "template": self.generator.template,
                    "supports_min_p": self.generator.supports_min_p,
                });
                v["reward"] = ep(&self.reward);
                v["embedding"] = ep(&self.embedding);
            }
        }
        v
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.identity().to_string().as_bytes()))
    }

    pub fn run_id(&self, dataset_hash: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash().as_bytes());
        h.update(b"\0");
        h.update(dataset_hash.as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn manifest(&self, dataset_hash: &str) -> RunManifest {
        RunManifest {
            run_id: self.run_id(dataset_hash),
            config: serde_json::to_value(self).unwrap_or(Value::Null),
            config_hash: self.config_hash(),
            dataset_hash: dataset_hash.to_string(),
            started_at_unix: unix_now(),
            finished_at_unix: None,
            backends: BTreeMap::new(),
            code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn build_backends(&self, questions: &[Question]) -> Result<Backends, ConfigError> {
        match self.backend {
            BackendKind::Sim => {
                let world = SimWorld::with_perturbation(
                    self.simulation.profile,
                    self.simulation.perturbation,
                    questions.to_vec(),
                )
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let scorer: Arc<dyn StepScorer> = match self.simulation.scorer {
                    SimScorerKind::Oracle => Arc::new(OracleScorer::new(world.clone())),
                    SimScorerKind::Constant => Arc::new(ConstantScorer(0.0)),
                };
                Ok(Backends {
                    generator: Arc::new(SimulatedBackend::new(world.clone())),
                    scorer: Some(scorer),
                    embedder: Some(Arc::new(HashingEmbedder::new(self.simulation.embedding_dim))),
                    world: Some(world),
                })
            }
            BackendKind::Http => {
                let g = &self.generator;
                let generator = CompletionsClient::new(&g.endpoint, g.template, g.supports_min_p)?;
                let generator: Arc<dyn Generator> = Arc::new(Limited::new(generator, g.endpoint.max_in_flight));
                let scorer = match self.reward.url {
                    Some(_) => Some(Arc::new(Limited::new(RewardClient::new(&self.reward)?, self.reward.max_in_flight))
                        as Arc<dyn StepScorer>),
                    None => None,
                };
                let embedder = match self.embedding.url {
                    Some(_) => Some(Arc::new(Limited::new(EmbedClient::new(&self.embedding)?, self.embedding.max_in_flight))
                        as Arc<dyn Embedder>),
                    None => None,
                };
                Ok(Backends {
                    generator,
                    scorer,
                    embedder,
                    world: None,
                })
            }
        }
    }
}

/// Hex SHA-256 of a dataset file's bytes.
pub fn dataset_hash(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

pub struct Backends {
    pub generator: Arc<dyn Generator>,
    pub scorer: Option<Arc<dyn StepScorer>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub world: Option<Arc<SimWorld>>,
}

impl Backends {
    pub fn scorer(&self) -> Result<&Arc<dyn StepScorer>, ConfigError> {
        self.scorer
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid(format!("reward.url or {ENV_PREFIX}_REWARD_URL is required")))
    }

    pub fn embedder(&self) -> Result<&Arc<dyn Embedder>, ConfigError> {
        self.embedder
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid(format!("embedding.url or {ENV_PREFIX}_EMBED_URL is required")))
    }
}
