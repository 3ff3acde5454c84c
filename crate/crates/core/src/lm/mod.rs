//! Pluggable text-model backends.
//!
//! A backend embeds text and completes one of three prompt kinds. The
//! [`StubBackend`] is a pure rule-based stand-in used in tests and offline
//! runs; [`RemoteBackend`] talks to an OpenAI-compatible HTTP endpoint.

mod prompts;
mod remote;
mod stub;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompts::{fields, render_prompt, PromptFields, PromptKind};
pub use remote::{RemoteBackend, RemoteConfig};
pub use stub::{
    clarity, content_tokens, mentioned_tags, sanitize_query, stub_plan, summarize_stats, HistoryStats, PlanSignals,
    StubBackend, EMPTY_SUMMARY, STUB_DIM,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input error: {0}")]
    Input(String),
    #[error("template error: missing placeholder {{{0}}}")]
    Template(String),
    #[error("backend error after {attempts} attempt(s) (retryable: {retryable}): {message}")]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },
    #[error("malformed backend response: {0}")]
    Response(String),
}

/// Raw (pre-projection) text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawVector(pub Vec<f64>);

impl RawVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub trait TextBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Deterministic per backend instance.
    fn embed_text(&self, text: &str) -> Result<RawVector, BackendError>;

    fn complete(&self, kind: PromptKind, fields: &PromptFields) -> Result<String, BackendError>;
}

impl<T: TextBackend + ?Sized> TextBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn embed_text(&self, text: &str) -> Result<RawVector, BackendError> {
        (**self).embed_text(text)
    }

    fn complete(&self, kind: PromptKind, fields: &PromptFields) -> Result<String, BackendError> {
        (**self).complete(kind, fields)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Remote,
}

/// Backend settings; the remote fields are ignored by the stub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    /// Model serving the cloud role (planning, semantic embeddings).
    pub cloud_model: String,
    /// Model serving the device role (abstracts, explanations).
    pub device_model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub concurrency: usize,
    pub max_retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Stub,
            base_url: "http://127.0.0.1:8000/v1".into(),
            cloud_model: "cloud-llm".into(),
            device_model: "device-slm".into(),
            embedding_model: "cloud-llm".into(),
            api_key_env: "CDREC_API_KEY".into(),
            timeout_ms: 30_000,
            concurrency: 4,
            max_retries: 3,
        }
    }
}

/// Backends for the two roles.
#[derive(Clone)]
pub struct Backends {
    pub cloud: Arc<dyn TextBackend>,
    pub device: Arc<dyn TextBackend>,
}

impl Backends {
    pub fn stub() -> Self {
        let stub: Arc<dyn TextBackend> = Arc::new(StubBackend::new());
        Self {
            cloud: stub.clone(),
            device: stub,
        }
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        match cfg.kind {
            BackendKind::Stub => Ok(Self::stub()),
            BackendKind::Remote => {
                let token = std::env::var(&cfg.api_key_env).ok();
                let make = |model: &str| {
                    RemoteBackend::new(RemoteConfig {
                        base_url: cfg.base_url.clone(),
                        chat_model: model.to_string(),
                        embedding_model: cfg.embedding_model.clone(),
                        api_key: token.clone(),
                        timeout: std::time::Duration::from_millis(cfg.timeout_ms),
                        concurrency: cfg.concurrency.max(1),
                        max_retries: cfg.max_retries,
                        backoff: std::time::Duration::from_millis(200),
                    })
                };
                Ok(Self {
                    cloud: Arc::new(make(&cfg.cloud_model)?),
                    device: Arc::new(make(&cfg.device_model)?),
                })
            }
        }
    }
}
