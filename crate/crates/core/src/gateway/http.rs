//! OpenAI-compatible HTTP backend.
//!
//! Generation and judging go through `POST /v1/chat/completions`, embeddings
//! through `POST /v1/embeddings`, and per-token log probabilities through
//! `POST /v1/completions` in echo mode (`max_tokens: 0, echo: true`), which
//! is the one wire shape that returns logprobs for a caller-supplied text.
//!
//! Authentication is a bearer token read from a per-backend environment
//! variable; a missing variable fails at construction with the variable name
//! in the message. Timeouts, connection failures, HTTP 429, and HTTP 5xx are
//! reported as retryable; other statuses are not.

use std::time::Duration;

use serde::Deserialize;

use super::{Backend, BackendRequest, BackendResponse, RequestKind, Role, Usage};
use crate::error::{Error, Result};

/// Connection settings for one OpenAI-compatible backend.
#[derive(Clone, Debug)]
pub struct HttpBackendConfig {
    /// Identifier used in manifests and logs.
    pub id: String,
    /// Scheme + host (+ optional path prefix), without the `/v1/...` suffix.
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Per-request timeout.
    pub timeout_secs: u64,
}

impl HttpBackendConfig {
    pub fn new(id: impl Into<String>, base_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        HttpBackendConfig {
            id: id.into(),
            base_url: base_url.into(),
            api_key_env: api_key_env.into(),
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

// manual impl so the API key can never leak through debug formatting
impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| Error::MissingEnv {
            backend: config.id.clone(),
            var: config.api_key_env.clone(),
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport { message: e.to_string(), retryable: false })?;
        Ok(HttpBackend { config, api_key, client })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String> {
        let response = self
            .client
            .post(self.endpoint(path))
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| Error::Transport {
                message: format!("{path}: {e}"),
                // connection/timeout trouble is worth retrying
                retryable: true,
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| Error::Transport {
            message: format!("{path}: reading body: {e}"),
            retryable: true,
        })?;
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err(Error::Transport {
                message: format!("{path}: HTTP {status}: {}", snippet(&text)),
                retryable,
            });
        }
        Ok(text)
    }

    fn chat(&self, req: &BackendRequest) -> Result<BackendResponse> {
        let messages: Vec<serde_json::Value> = req
            .messages
            .iter()
            .map(|m| {
                serde_json::json!({
                    "role": match m.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    },
                    "content": m.content,
                })
            })
            .collect();
        let mut body = serde_json::json!({
            "model": req.model,
            "messages": messages,
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "n": req.params.n_samples,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = serde_json::json!(seed);
        }
        let raw = self.post("/v1/chat/completions", &body)?;
        let parsed: ChatResponse = parse(&raw)?;
        let texts: Vec<String> = parsed
            .choices
            .into_iter()
            .map(|c| {
                c.message.content.ok_or_else(|| Error::MalformedPayload {
                    message: "choice without message content".into(),
                    payload: snippet(&raw),
                })
            })
            .collect::<Result<_>>()?;
        if texts.len() != req.params.n_samples as usize {
            return Err(Error::MalformedPayload {
                message: format!("expected {} choices, got {}", req.params.n_samples, texts.len()),
                payload: snippet(&raw),
            });
        }
        Ok(BackendResponse {
            texts,
            token_logprobs: None,
            embeddings: None,
            usage: parsed.usage.map(Into::into).unwrap_or_default(),
            from_cache: false,
        })
    }

    fn embed(&self, req: &BackendRequest) -> Result<BackendResponse> {
        let inputs: Vec<&str> = req.messages.iter().map(|m| m.content.as_str()).collect();
        let body = serde_json::json!({ "model": req.model, "input": inputs });
        let raw = self.post("/v1/embeddings", &body)?;
        let parsed: EmbedResponse = parse(&raw)?;
        let mut data = parsed.data;
        data.sort_by_key(|d| d.index);
        if data.len() != inputs.len() {
            return Err(Error::MalformedPayload {
                message: format!("expected {} embeddings, got {}", inputs.len(), data.len()),
                payload: snippet(&raw),
            });
        }
        Ok(BackendResponse {
            texts: Vec::new(),
            token_logprobs: None,
            embeddings: Some(data.into_iter().map(|d| d.embedding).collect()),
            usage: parsed.usage.map(Into::into).unwrap_or_default(),
            from_cache: false,
        })
    }

    fn logprob(&self, req: &BackendRequest) -> Result<BackendResponse> {
        let text = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join(" ");
        let body = serde_json::json!({
            "model": req.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let raw = self.post("/v1/completions", &body)?;
        let parsed: CompletionsResponse = parse(&raw)?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| Error::MalformedPayload {
            message: "completions response without choices".into(),
            payload: snippet(&raw),
        })?;
        let lp = choice.logprobs.ok_or_else(|| Error::MalformedPayload {
            message: "backend returned no logprobs block".into(),
            payload: snippet(&raw),
        })?;
        // the first token has no context and typically reports null; skip nulls
        let token_logprobs: Vec<(String, f64)> = lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .filter_map(|(token, logprob)| logprob.map(|l| (token, l)))
            .collect();
        Ok(BackendResponse {
            texts: vec![text],
            token_logprobs: Some(token_logprobs),
            embeddings: None,
            usage: parsed.usage.map(Into::into).unwrap_or_default(),
            from_cache: false,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn execute(&self, req: &BackendRequest) -> Result<BackendResponse> {
        match req.kind {
            RequestKind::Generate | RequestKind::Judge => self.chat(req),
            RequestKind::Embed => self.embed(req),
            RequestKind::Logprob => self.logprob(req),
        }
    }
}

fn parse<'a, T: Deserialize<'a>>(raw: &'a str) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| Error::MalformedPayload {
        message: e.to_string(),
        payload: snippet(raw),
    })
}

fn snippet(raw: &str) -> String {
    const LIMIT: usize = 2000;
    if raw.len() <= LIMIT {
        raw.to_string()
    } else {
        let mut end = LIMIT;
        while !raw.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}… ({} bytes total)", &raw[..end], raw.len())
    }
}

// Wire shapes (only the fields we read).

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl From<WireUsage> for Usage {
    fn from(w: WireUsage) -> Usage {
        Usage { prompt_tokens: w.prompt_tokens, completion_tokens: w.completion_tokens }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionsChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct CompletionsChoice {
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
}
