//! Blocking client for OpenAI-compatible `chat/completions` and `embeddings`
//! endpoints.

use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{render_prompt, BackendError, PromptFields, PromptKind, RawVector, TextBackend};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// e.g. `http://host:port/v1`
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Maximum in-flight requests.
    pub concurrency: usize,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff: Duration,
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    client: Client,
    permits: Permits,
    dim: OnceLock<usize>,
    label: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                retryable: false,
                message: e.to_string(),
            })?;
        let label = format!("remote:{}", cfg.chat_model);
        Ok(Self {
            permits: Permits::new(cfg.concurrency.max(1)),
            cfg,
            client,
            dim: OnceLock::new(),
            label,
        })
    }

    /// Embedding width, known after the first successful embedding call.
    pub fn pinned_dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Result<String, Failure> {
        let _permit = self.permits.acquire();
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                Failure::Retry(e.to_string())
            } else {
                Failure::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retry(e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            Err(Failure::Retry(format!("HTTP {status}: {text}")))
        } else {
            Err(Failure::Fatal(format!("HTTP {status}: {text}")))
        }
    }

    /// POST with exponential backoff on transient failures.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut delay = self.cfg.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.post_once(path, body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(message)) => {
                    return Err(BackendError::Transport {
                        attempts,
                        retryable: false,
                        message,
                    })
                }
                Err(Failure::Retry(message)) => {
                    if attempts > self.cfg.max_retries {
                        return Err(BackendError::Transport {
                            attempts,
                            retryable: true,
                            message,
                        });
                    }
                    log::warn!(
                        "{} {path}: attempt {attempts} failed ({message}); retrying in {delay:?}",
                        self.label
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}

impl TextBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.label
    }

    fn embed_text(&self, text: &str) -> Result<RawVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Input("cannot embed empty text".into()));
        }
        let body = json!({ "model": self.cfg.embedding_model, "input": text });
        let raw = self.post("embeddings", &body)?;
        let resp: EmbeddingResponse = serde_json::from_str(&raw).map_err(|e| BackendError::Response(e.to_string()))?;
        let values = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Response("empty embedding data".into()))?
            .embedding;
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Response("embedding empty or non-finite".into()));
        }
        let pinned = *self.dim.get_or_init(|| values.len());
        if pinned != values.len() {
            return Err(BackendError::Response(format!(
                "embedding width changed from {pinned} to {}",
                values.len()
            )));
        }
        Ok(RawVector(values))
    }

    fn complete(&self, kind: PromptKind, fields: &PromptFields) -> Result<String, BackendError> {
        let prompt = render_prompt(kind, fields)?;
        let body = json!({
            "model": self.cfg.chat_model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
        });
        let raw = self.post("chat/completions", &body)?;
        let resp: ChatResponse = serde_json::from_str(&raw).map_err(|e| BackendError::Response(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Response("no choices in completion".into()))
    }
}
