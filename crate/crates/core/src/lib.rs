//! Early pruning of sampled reasoning traces by first-step reward.

pub mod analysis;
pub mod answer;
pub mod backend;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod report;
pub mod segment;
pub mod store;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] answer::DomainError),
    #[error(transparent)]
    Segment(#[from] segment::SegmentError),
    #[error(transparent)]
    Backend(#[from] backend::BackendError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Segment(_) => "segmentation",
            Error::Backend(_) => "backend",
            Error::Engine(_) => "engine",
            Error::Store(_) => "store",
            Error::Metrics(_) => "metrics",
            Error::Analysis(_) => "analysis",
            Error::Config(_) => "config",
            Error::Report(_) => "report",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
