use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{estimate_tokens, BackendError, ChatBackend, Completion, CompletionRequest, RateLimiter};
use crate::model::Usage;

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_max_attempts() -> u32 {
    5
}
fn default_base_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    30_000
}

/// Connection settings for an OpenAI-compatible chat-completions server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_backoff_ms")]
    pub base_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        LiveConfig {
            endpoint: endpoint.into(),
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout_secs(),
            max_attempts: default_max_attempts(),
            base_backoff_ms: default_base_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
            requests_per_minute: None,
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Option<RateLimiter>,
    attempts: AtomicU64,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        if config.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout_secs must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without authorization", config.api_key_env);
        }
        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        let limiter = config.requests_per_minute.map(RateLimiter::per_minute);
        Ok(LiveBackend { config, url, api_key, client, limiter, attempts: AtomicU64::new(0) })
    }

    /// Total HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn body(req: &CompletionRequest) -> Value {
        let messages: Vec<Value> =
            req.messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect();
        let mut body = json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.sampling.temperature,
            "top_p": req.sampling.top_p,
            "max_tokens": req.sampling.max_tokens,
        });
        if let Some(seed) = req.sampling.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value, req: &CompletionRequest) -> Result<(String, Usage), BackendError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut call = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if status != 200 {
            if status == 400 && text.contains("context_length_exceeded") {
                return Err(BackendError::ContextLengthExceeded);
            }
            return Err(BackendError::HttpError { status, body: text.chars().take(500).collect() });
        }
        parse_response(&text, req)
    }
}

fn parse_response(text: &str, req: &CompletionRequest) -> Result<(String, Usage), BackendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?
        .to_string();
    let reported = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64);
    let usage = match (reported("prompt_tokens"), reported("completion_tokens")) {
        (Some(p), Some(c)) => Usage::new(p, c),
        _ => {
            log::debug!("response carries no usage; estimating");
            Usage::new(super::estimate_message_tokens(&req.messages), estimate_tokens(&content))
        }
    };
    Ok((content, usage))
}

impl ChatBackend for LiveBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let body = Self::body(req);
        let started = Instant::now();
        let mut attempt = 1;
        loop {
            match self.attempt(&body, req) {
                Ok((text, usage)) => {
                    return Ok(Completion { text, usage, latency_seconds: started.elapsed().as_secs_f64() })
                }
                Err(e) if e.is_transient() && attempt < self.config.max_attempts => {
                    let exp = self.config.base_backoff_ms.saturating_mul(1 << (attempt - 1).min(20));
                    let capped = exp.min(self.config.max_backoff_ms) as f64;
                    let delay = capped * rand::thread_rng().gen_range(0.5..=1.0);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {:.0} ms", delay);
                    thread::sleep(Duration::from_secs_f64(delay / 1000.0));
                    attempt += 1;
                }
                Err(BackendError::HttpError { status: 429, .. }) => {
                    return Err(BackendError::RateLimited { attempts: attempt })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
