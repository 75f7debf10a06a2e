//! OpenAI-compatible chat-completions backend and embeddings client.
//!
//! Environment:
//! - `TIDYLOOP_LLM_ENDPOINT`: base URL (`…/v1`) or the full `…/chat/completions` URL
//! - `TIDYLOOP_LLM_API_KEY`: bearer token, optional for local servers
//! - `TIDYLOOP_LLM_MODEL`: model name
//! - `TIDYLOOP_EMBEDDING_URL`: full embeddings URL
//! - `TIDYLOOP_EMBEDDING_MODEL`: embedding model name, optional
//! - `TIDYLOOP_EMBEDDING_API_KEY`: falls back to `TIDYLOOP_LLM_API_KEY`

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use tidyloop_core::llm_backend::{BackendError, PlannerBackend, PromptBundle, RawCompletion, Usage};
use tidyloop_core::preference::{Embedder, PreferenceError};

use crate::config::RemoteConfig;
use crate::error::CliError;

pub const ENV_ENDPOINT: &str = "TIDYLOOP_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "TIDYLOOP_LLM_API_KEY";
pub const ENV_MODEL: &str = "TIDYLOOP_LLM_MODEL";
pub const ENV_EMBEDDING_URL: &str = "TIDYLOOP_EMBEDDING_URL";
pub const ENV_EMBEDDING_MODEL: &str = "TIDYLOOP_EMBEDDING_MODEL";
pub const ENV_EMBEDDING_API_KEY: &str = "TIDYLOOP_EMBEDDING_API_KEY";

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

fn client(timeout: Duration) -> Result<reqwest::blocking::Client, String> {
    // reqwest is built without a bundled crypto provider
    let _ = rustls::crypto::ring::default_provider().install_default();
    reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| e.to_string())
}

fn chat_url(endpoint: &str) -> String {
    let e = endpoint.trim_end_matches('/');
    if e.ends_with("/chat/completions") {
        e.to_string()
    } else {
        format!("{e}/chat/completions")
    }
}

pub struct RemoteBackend {
    url: String,
    api_key: Option<String>,
    model: String,
    temperature: f64,
    http: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, api_key: Option<String>, model: &str, cfg: &RemoteConfig) -> Result<Self, CliError> {
        let http = client(Duration::from_secs(cfg.timeout_secs)).map_err(|e| CliError::new("BackendConfig", e))?;
        Ok(Self { url: chat_url(endpoint), api_key, model: model.to_string(), temperature: cfg.temperature, http })
    }

    pub fn from_env(cfg: &RemoteConfig) -> Result<Self, CliError> {
        let endpoint =
            env(ENV_ENDPOINT).ok_or_else(|| CliError::new("BackendConfig", format!("{ENV_ENDPOINT} is not set")))?;
        let model = env(ENV_MODEL).ok_or_else(|| CliError::new("BackendConfig", format!("{ENV_MODEL} is not set")))?;
        Self::new(&endpoint, env(ENV_API_KEY), &model, cfg)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

fn http_error(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Http(e.to_string())
    }
}

fn post_json(
    http: &reqwest::blocking::Client,
    url: &str,
    key: Option<&str>,
    body: &serde_json::Value,
) -> Result<String, BackendError> {
    let mut req = http.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    let resp = req.send().map_err(http_error)?;
    let status = resp.status();
    let text = resp.text().map_err(http_error)?;
    if !status.is_success() {
        let snippet: String = text.chars().take(300).collect();
        return Err(BackendError::Http(format!("{status}: {snippet}")));
    }
    Ok(text)
}

impl PlannerBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete_raw(&self, bundle: &PromptBundle) -> Result<RawCompletion, BackendError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.context},
            ],
        });
        let text = post_json(&self.http, &self.url, self.api_key.as_deref(), &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Http(format!("unexpected response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Http("response has no message content".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(RawCompletion { raw: content, usage })
    }
}

/// Embeddings endpoint speaking the `{"input", "model"}` → `data[0].embedding` format.
pub struct RemoteEmbedder {
    url: String,
    api_key: Option<String>,
    model: Option<String>,
    http: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(
        url: &str,
        api_key: Option<String>,
        model: Option<String>,
        cfg: &RemoteConfig,
    ) -> Result<Self, CliError> {
        let http = client(Duration::from_secs(cfg.timeout_secs)).map_err(|e| CliError::new("EmbedderConfig", e))?;
        Ok(Self { url: url.to_string(), api_key, model, http })
    }

    pub fn from_env(cfg: &RemoteConfig) -> Result<Self, CliError> {
        let url = env(ENV_EMBEDDING_URL)
            .ok_or_else(|| CliError::new("EmbedderConfig", format!("{ENV_EMBEDDING_URL} is not set")))?;
        Self::new(&url, env(ENV_EMBEDDING_API_KEY).or_else(|| env(ENV_API_KEY)), env(ENV_EMBEDDING_MODEL), cfg)
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, PreferenceError> {
        let mut body = json!({ "input": text });
        if let Some(m) = &self.model {
            body["model"] = json!(m);
        }
        let raw = post_json(&self.http, &self.url, self.api_key.as_deref(), &body)
            .map_err(|e| PreferenceError::Embedder(e.to_string()))?;
        let parsed: EmbeddingResponse = serde_json::from_str(&raw)
            .map_err(|e| PreferenceError::Embedder(format!("unexpected response body: {e}")))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| PreferenceError::Embedder("empty embedding".into()))
    }
}
