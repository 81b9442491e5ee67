//! Chat-completion providers.
//!
//! [`ChatProvider`] is the single seam between the agents and a model. Two
//! implementations ship: [`HttpProvider`] speaks the common chat-completions
//! JSON shape, and [`ScriptedProvider`] replays a queue of canned replies for
//! offline, bit-reproducible runs. [`LoggedProvider`] wraps either one and
//! records every outbound request for audit.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the API key for [`HttpProvider`].
pub const API_KEY_ENV: &str = "TESTCHAIN_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 0.2, top_p: 0.95, max_tokens: 1024 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed (HTTP {status}) for {context}")]
    Auth { status: u16, context: String },
    #[error("rate limited (HTTP 429) for {context}")]
    RateLimited { context: String },
    #[error("server error (HTTP {status}) for {context}: {body}")]
    Server { status: u16, context: String, body: String },
    #[error("request rejected (HTTP {status}) for {context}: {body}")]
    Rejected { status: u16, context: String, body: String },
    #[error("transport failure for {context}: {message}")]
    Transport { context: String, message: String },
    #[error("malformed provider response for {context}: {message}")]
    MalformedResponse { context: String, message: String },
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("scripted replay exhausted after {served} replies")]
    ReplayExhausted { served: usize },
}

impl LlmError {
    /// Whether another attempt might succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::RateLimited { .. } | LlmError::Server { .. } | LlmError::Transport { .. })
    }
}

pub trait ChatProvider: Send + Sync {
    /// Returns exactly one assistant message for `messages`.
    fn complete(&self, messages: &[ChatMessage], config: &SamplingConfig) -> Result<ChatMessage, LlmError>;

    /// Short label for logs and run snapshots.
    fn describe(&self) -> String;
}

fn check_request(messages: &[ChatMessage], config: &SamplingConfig) -> Result<(), LlmError> {
    if messages.is_empty() {
        return Err(LlmError::InvalidRequest("message list is empty".into()));
    }
    config.validate()
}

/// Replays queued replies in order, ignoring the request content.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    queue: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    replies: VecDeque<String>,
    served: usize,
}

impl ScriptedProvider {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let replies = replies.into_iter().map(Into::into).collect();
        ScriptedProvider { queue: Mutex::new(ScriptState { replies, served: 0 }) }
    }

    pub fn served(&self) -> usize {
        self.queue.lock().expect("script lock").served
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").replies.len()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, messages: &[ChatMessage], config: &SamplingConfig) -> Result<ChatMessage, LlmError> {
        check_request(messages, config)?;
        let mut state = self.queue.lock().expect("script lock");
        match state.replies.pop_front() {
            Some(reply) => {
                state.served += 1;
                Ok(ChatMessage::assistant(reply))
            }
            None => Err(LlmError::ReplayExhausted { served: state.served }),
        }
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}

/// Per-question reply queues, loaded from a JSON object `{task_id: [reply, ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptBook {
    pub scripts: BTreeMap<String, Vec<String>>,
}

impl ScriptBook {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// A fresh provider for `task_id`; unknown ids get an empty queue.
    pub fn provider_for(&self, task_id: &str) -> ScriptedProvider {
        ScriptedProvider::new(self.scripts.get(task_id).cloned().unwrap_or_default())
    }
}

/// One outbound request as seen by [`LoggedProvider`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub messages: Vec<ChatMessage>,
    pub sampling: SamplingConfig,
}

/// Records every request passed to the inner provider.
pub struct LoggedProvider<'a> {
    inner: &'a dyn ChatProvider,
    log: Mutex<Vec<RequestRecord>>,
}

impl<'a> LoggedProvider<'a> {
    pub fn new(inner: &'a dyn ChatProvider) -> Self {
        LoggedProvider { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn records(&self) -> Vec<RequestRecord> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("log lock").len()
    }
}

impl ChatProvider for LoggedProvider<'_> {
    fn complete(&self, messages: &[ChatMessage], config: &SamplingConfig) -> Result<ChatMessage, LlmError> {
        tracing::debug!(
            provider = %self.inner.describe(),
            temperature = config.temperature,
            top_p = config.top_p,
            max_tokens = config.max_tokens,
            messages = %serde_json::to_string(messages).unwrap_or_default(),
            "chat completion request"
        );
        self.log
            .lock()
            .expect("log lock")
            .push(RequestRecord { messages: messages.to_vec(), sampling: *config });
        self.inner.complete(messages, config)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    pub multiplier: f64,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            multiplier: 2.0,
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before retry number `retry` (1-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        self.base_delay.mul_f64(factor).min(self.max_delay)
    }

    pub fn jittered(&self, retry: u32) -> Duration {
        let ceiling = self.ceiling(retry);
        ceiling.mul_f64(rand::thread_rng().gen_range(0.0..=1.0))
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_request_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_request_timeout_secs() -> u64 {
    120
}

/// Chat-completions client: POST `{model, messages, temperature, top_p, max_tokens}`,
/// read `choices[0].message.content`.
pub struct HttpProvider {
    settings: HttpSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

impl HttpProvider {
    pub fn new(settings: HttpSettings, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider { settings, api_key, agent }
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(settings: HttpSettings) -> Self {
        Self::new(settings, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }

    fn context(&self, messages: &[ChatMessage]) -> String {
        format!("model {} at {} ({} messages)", self.settings.model, self.settings.endpoint, messages.len())
    }

    fn attempt(&self, messages: &[ChatMessage], config: &SamplingConfig) -> Result<ChatMessage, LlmError> {
        let context = self.context(messages);
        let body = WireRequest {
            model: &self.settings.model,
            messages,
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
        };
        let mut request = self.agent.post(&self.settings.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| LlmError::Transport { context: context.clone(), message: e.to_string() })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport { context: context.clone(), message: e.to_string() })?;
        match status {
            200..=299 => parse_completion(&text).map_err(|message| LlmError::MalformedResponse { context, message }),
            401 | 403 => Err(LlmError::Auth { status, context }),
            429 => Err(LlmError::RateLimited { context }),
            500..=599 => Err(LlmError::Server { status, context, body: text }),
            _ => Err(LlmError::Rejected { status, context, body: text }),
        }
    }
}

fn parse_completion(body: &str) -> Result<ChatMessage, String> {
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| "missing choices[0].message.content".to_string())?;
    match content {
        serde_json::Value::String(text) => Ok(ChatMessage::assistant(text.clone())),
        serde_json::Value::Null => Ok(ChatMessage::assistant(String::new())),
        other => Err(format!("content is not a string: {other}")),
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, messages: &[ChatMessage], config: &SamplingConfig) -> Result<ChatMessage, LlmError> {
        check_request(messages, config)?;
        let policy = self.settings.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(messages, config) {
                Ok(reply) => return Ok(reply),
                Err(err) if err.is_retryable() && attempt < policy.max_attempts => {
                    let delay = policy.jittered(attempt);
                    tracing::warn!(attempt, ?delay, error = %err, "retrying chat completion");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(err) if err.is_retryable() => {
                    return Err(LlmError::RetriesExhausted { attempts: attempt, last: Box::new(err) });
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn describe(&self) -> String {
        format!("http:{}", self.settings.model)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("template placeholder `{{{0}}}` has no binding")]
pub struct MissingBinding(pub String);

/// Substitutes `{name}` placeholders, where `name` is an identifier.
///
/// `{{` and `}}` produce literal braces. Braces not forming a placeholder
/// (for example a Python dict literal) pass through untouched. Unused
/// bindings are ignored.
pub fn render_prompt(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, MissingBinding> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if let Some(name) = placeholder_name(tail) {
            let value = bindings.get(name).ok_or_else(|| MissingBinding(name.to_string()))?;
            out.push_str(value);
            rest = &tail[name.len() + 2..];
        } else {
            out.push_str(&tail[..1]);
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn placeholder_name(tail: &str) -> Option<&str> {
    let inner = tail.strip_prefix('{')?;
    let end = inner.find('}')?;
    let name = &inner[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    ((first == '_' || first.is_ascii_alphabetic()) && chars.all(|c| c == '_' || c.is_ascii_alphanumeric()))
        .then_some(name)
}

/// Names of the placeholders used by `template`, in order of first use.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            rest = &tail[2..];
        } else if let Some(name) = placeholder_name(tail) {
            if !names.iter().any(|n| n == name) {
                names.push(name.to_string());
            }
            rest = &tail[name.len() + 2..];
        } else {
            rest = &tail[1..];
        }
    }
    names
}
