//! Chat-completion backends: live HTTP, a deterministic scripted model,
//! record/replay, plus token estimation, history truncation and pricing.

mod live;
mod ratelimit;
mod replay;
mod scripted;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Message, Role, SamplingParams, Usage};

pub use live::{LiveBackend, LiveConfig};
pub use ratelimit::RateLimiter;
pub use replay::{RecordingBackend, ReplayBackend, ReplayEntry};
pub use scripted::{
    scripted_respond, AnswerKey, EchoBranch, JudgeScript, JudgeSide, OptionTextBackend, ScriptedAgentModel,
    ScriptedBackend, ScriptedConfig, ScriptedReply,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request timed out")]
    Timeout,
    #[error("http error {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("context length exceeded")]
    ContextLengthExceeded,
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether a live call that failed this way is worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) | BackendError::RateLimited { .. } => true,
            BackendError::HttpError { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub sampling: SamplingParams,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>, sampling: SamplingParams) -> Self {
        CompletionRequest { model_id: model_id.into(), messages, sampling }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        let systems: Vec<usize> = self
            .messages
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == Role::System)
            .map(|(i, _)| i)
            .collect();
        match systems.as_slice() {
            [] | [0] => {}
            [_] => return Err(BackendError::InvalidRequest("system message must come first".into())),
            _ => return Err(BackendError::InvalidRequest("more than one system message".into())),
        }
        self.sampling.validate().map_err(|e| BackendError::InvalidRequest(e.to_string()))
    }

    /// Content hash of everything that can influence the reply: model,
    /// messages (role, speaker, content) and sampling, seed included.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            model_id: &'a str,
            messages: Vec<(&'a str, &'a str, &'a str)>,
            temperature: f64,
            top_p: f64,
            max_tokens: u32,
            seed: Option<u64>,
        }
        let canonical = Canonical {
            model_id: &self.model_id,
            messages: self.messages.iter().map(|m| (m.role.as_str(), m.agent_id.as_str(), m.content.as_str())).collect(),
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
            max_tokens: self.sampling.max_tokens,
            seed: self.sampling.seed,
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// The agent issuing the request, taken from its messages.
    pub fn agent_id(&self) -> &str {
        self.messages.last().map(|m| m.agent_id.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    /// Time the call took. Deterministic backends report a synthetic value.
    pub latency_seconds: f64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError>;

    /// True when replies and latencies are pure functions of the request,
    /// so run timing can be taken from reported latencies instead of the
    /// wall clock.
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Adapts a closure into a backend. Handy for tests and custom stubs.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<Completion, BackendError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        (self.0)(req)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Approximate token count: characters / 4, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

pub fn estimate_message_tokens(messages: &[Message]) -> u64 {
    messages.iter().map(|m| estimate_tokens(&m.content)).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TruncateError {
    #[error("token limit {limit} is below the {floor} tokens of the system and final messages")]
    LimitTooSmall { limit: u64, floor: u64 },
}

/// Drops the oldest non-system messages until the estimated size fits in
/// `token_limit`. The system message and the final message always survive.
pub fn truncate_history(messages: &[Message], token_limit: u64) -> Result<(Vec<Message>, u32), TruncateError> {
    let total = estimate_message_tokens(messages);
    if total <= token_limit {
        return Ok((messages.to_vec(), 0));
    }
    let last = messages.len().saturating_sub(1);
    let protected = |i: usize, m: &Message| i == last || m.role == Role::System;
    let floor: u64 = messages
        .iter()
        .enumerate()
        .filter(|(i, m)| protected(*i, m))
        .map(|(_, m)| estimate_tokens(&m.content))
        .sum();
    if floor > token_limit {
        return Err(TruncateError::LimitTooSmall { limit: token_limit, floor });
    }

    let mut excess = total - token_limit;
    let mut drop = vec![false; messages.len()];
    let mut removed = 0u32;
    for (i, m) in messages.iter().enumerate() {
        if excess == 0 {
            break;
        }
        if protected(i, m) {
            continue;
        }
        drop[i] = true;
        removed += 1;
        excess = excess.saturating_sub(estimate_tokens(&m.content));
    }
    let kept = messages.iter().zip(&drop).filter(|(_, d)| !**d).map(|(m, _)| m.clone()).collect();
    Ok((kept, removed))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriceError {
    #[error("no price for model {0:?}")]
    UnknownModel(String),
    #[error("negative price for model {0:?}")]
    NegativePrice(String),
    #[error("cannot read price table {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid price table: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PriceRepr")]
pub struct ModelPrice {
    pub usd_per_1k_prompt_tokens: f64,
    pub usd_per_1k_completion_tokens: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PriceRepr {
    Pair(f64, f64),
    Named { usd_per_1k_prompt_tokens: f64, usd_per_1k_completion_tokens: f64 },
}

impl From<PriceRepr> for ModelPrice {
    fn from(r: PriceRepr) -> Self {
        let (p, c) = match r {
            PriceRepr::Pair(p, c) => (p, c),
            PriceRepr::Named { usd_per_1k_prompt_tokens: p, usd_per_1k_completion_tokens: c } => (p, c),
        };
        ModelPrice { usd_per_1k_prompt_tokens: p, usd_per_1k_completion_tokens: c }
    }
}

/// USD prices per 1000 tokens, keyed by model id. The JSON form maps each
/// model to either `[prompt, completion]` or an object with the two named
/// fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn new() -> Self {
        PriceTable::default()
    }

    pub fn with(mut self, model_id: impl Into<String>, prompt: f64, completion: f64) -> Self {
        self.models.insert(
            model_id.into(),
            ModelPrice { usd_per_1k_prompt_tokens: prompt, usd_per_1k_completion_tokens: completion },
        );
        self
    }

    pub fn validate(&self) -> Result<(), PriceError> {
        for (id, p) in &self.models {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(p.usd_per_1k_prompt_tokens) || !ok(p.usd_per_1k_completion_tokens) {
                return Err(PriceError::NegativePrice(id.clone()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PriceError> {
        let table: PriceTable = serde_json::from_str(text).map_err(|e| PriceError::Parse(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn from_file(path: &Path) -> Result<Self, PriceError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PriceError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn get(&self, model_id: &str) -> Result<ModelPrice, PriceError> {
        self.models.get(model_id).copied().ok_or_else(|| PriceError::UnknownModel(model_id.to_string()))
    }
}

pub fn cost_of(usage: Usage, model_id: &str, prices: &PriceTable) -> Result<f64, PriceError> {
    let p = prices.get(model_id)?;
    Ok(usage.prompt_tokens as f64 / 1000.0 * p.usd_per_1k_prompt_tokens
        + usage.completion_tokens as f64 / 1000.0 * p.usd_per_1k_completion_tokens)
}
