//! LLM access: provider configuration, an OpenAI-compatible HTTP client, an
//! offline stub, and the retry policy shared by enrichment and feedback.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("prompt has {tokens} tokens, over the limit of {limit}")]
    PromptTooLong { tokens: usize, limit: usize },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LlmError> },
    #[error("stub has no response for prompt {key}")]
    NoStubResponse { key: String },
    #[error("invalid llm configuration: {0}")]
    Config(String),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => matches!(status, 408 | 429 | 500..=599),
            _ => false,
        }
    }

    /// HTTP status of the underlying provider failure, if any.
    pub fn provider_status(&self) -> Option<u16> {
        match self {
            LlmError::Status { status, .. } => Some(*status),
            LlmError::Exhausted { last, .. } => last.provider_status(),
            _ => None,
        }
    }
}

/// Provider settings. `model_name` is free-form; nothing assumes a particular model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub provider_endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub api_key_env_var: String,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    pub max_retries: u32,
    /// Base delay of the exponential backoff between attempts.
    #[serde(with = "duration_secs")]
    pub retry_backoff: Duration,
    /// Pre-flight limit on prompt size, counted with [`count_prompt_tokens`].
    pub max_prompt_tokens: Option<usize>,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            provider_endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            api_key_env_var: "OPENAI_API_KEY".into(),
            request_timeout: Duration::from_secs(60),
            max_retries: 3,
            retry_backoff: Duration::from_millis(500),
            max_prompt_tokens: None,
        }
    }
}

impl LlmClientConfig {
    /// Deterministic settings used for dataset enrichment.
    pub fn for_enrichment() -> Self {
        Self::default()
    }

    /// Settings used for feedback prose.
    pub fn for_feedback() -> Self {
        Self { temperature: 0.7, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.model_name.is_empty() {
            return Err(LlmError::Config("model_name must be nonempty".into()));
        }
        Ok(())
    }
}

/// Whitespace token count used for pre-flight prompt limits.
pub fn count_prompt_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest<'a> {
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<String, LlmError>;
}

/// A completed request with its bookkeeping, suitable for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub model: String,
    pub prompt: String,
    pub response: String,
    pub attempts: u32,
}

/// Sends `prompt` under the retry policy of `config`.
///
/// Prompts over `max_prompt_tokens` fail before any call is made. Retryable
/// failures (timeouts, transport errors, 408/429/5xx) are retried up to
/// `max_retries` times with exponential backoff.
pub fn complete_with_retry(
    client: &dyn LlmClient,
    config: &LlmClientConfig,
    prompt: &str,
) -> Result<LlmExchange, LlmError> {
    if let Some(limit) = config.max_prompt_tokens {
        let tokens = count_prompt_tokens(prompt);
        if tokens > limit {
            return Err(LlmError::PromptTooLong { tokens, limit });
        }
    }
    let request = LlmRequest {
        prompt,
        temperature: config.temperature,
        max_output_tokens: config.max_output_tokens,
    };
    let max_attempts = config.max_retries + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.complete(&request) {
            Ok(response) => {
                return Ok(LlmExchange {
                    model: config.model_name.clone(),
                    prompt: prompt.to_string(),
                    response,
                    attempts: attempt,
                })
            }
            Err(e) if e.is_retryable() && attempt < max_attempts => {
                tracing::warn!(attempt, max_attempts, error = %e, "llm request failed, retrying");
                let delay = config.retry_backoff.saturating_mul(1 << (attempt - 1).min(16));
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            Err(e) if e.is_retryable() => {
                tracing::error!(attempts = attempt, error = %e, "llm request failed, giving up");
                return Err(LlmError::Exhausted { attempts: attempt, last: Box::new(e) });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Client for OpenAI-compatible `chat/completions` endpoints.
pub struct HttpLlmClient {
    config: LlmClientConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(config: LlmClientConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env_var).ok();
        let http = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.config.model_name,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut req = self.http.post(&self.config.provider_endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body: text });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
    }
}

/// Content key of a prompt, used to name stub fixture files.
pub fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

type Responder = Box<dyn Fn(&str) -> Result<String, LlmError> + Send + Sync>;

/// Offline LLM for tests and `--llm stub:<dir>` runs.
///
/// Lookup order: scripted queue, exact prompt match (`<sha256(prompt)>.txt`
/// in a fixture directory), substring rules (`rules.jsonl` lines of
/// `{"contains": ..., "response": ...}`), responder function, `default.txt`.
#[derive(Default)]
pub struct StubLlm {
    script: Mutex<VecDeque<Result<String, LlmError>>>,
    exact: HashMap<String, String>,
    rules: Vec<(String, String)>,
    responder: Option<Responder>,
    default: Option<String>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

#[derive(Deserialize)]
struct StubRule {
    contains: String,
    response: String,
}

impl StubLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answers every prompt with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self { default: Some(text.into()), ..Self::default() }
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&str) -> Result<String, LlmError> + Send + Sync + 'static,
    {
        Self { responder: Some(Box::new(f)), ..Self::default() }
    }

    pub fn from_dir(dir: &Path) -> Result<Self, LlmError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| LlmError::Config(format!("{}: {e}", p.display())));
        let mut stub = Self::default();
        let entries = fs::read_dir(dir).map_err(|e| LlmError::Config(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name == "default.txt" {
                stub.default = Some(read(&path)?);
            } else if name == "rules.jsonl" {
                for line in read(&path)?.lines().filter(|l| !l.trim().is_empty()) {
                    let rule: StubRule = serde_json::from_str(line).map_err(|e| LlmError::Config(e.to_string()))?;
                    stub.rules.push((rule.contains, rule.response));
                }
            } else if let Some(key) = name.strip_suffix(".txt") {
                if key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit()) {
                    stub.exact.insert(key.to_string(), read(&path)?);
                }
            }
        }
        Ok(stub)
    }

    pub fn with_rule(mut self, contains: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push((contains.into(), response.into()));
        self
    }

    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }

    /// Queues responses consumed in order before any other lookup.
    pub fn with_script<I>(self, items: I) -> Self
    where
        I: IntoIterator<Item = Result<String, LlmError>>,
    {
        self.script.lock().expect("stub lock").extend(items);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("stub lock").clone()
    }
}

impl LlmClient for StubLlm {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().expect("stub lock").push(request.prompt.to_string());
        if let Some(item) = self.script.lock().expect("stub lock").pop_front() {
            return item;
        }
        let key = prompt_key(request.prompt);
        if let Some(r) = self.exact.get(&key) {
            return Ok(r.clone());
        }
        if let Some((_, r)) = self.rules.iter().find(|(needle, _)| request.prompt.contains(needle.as_str())) {
            return Ok(r.clone());
        }
        if let Some(f) = &self.responder {
            return f(request.prompt);
        }
        self.default.clone().ok_or(LlmError::NoStubResponse { key })
    }
}
