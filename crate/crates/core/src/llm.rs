//! Chat-completions clients used for explanation generation and scoring.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::fnv1a64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

pub trait ChatClient: Send + Sync {
    /// Identifier of the generating model, recorded with its outputs.
    fn model_id(&self) -> &str;

    /// One attempt. Transport failures are returned as [`Error::Transport`]
    /// so that [`complete_with_retry`] can retry them.
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

impl<C: ChatClient + ?Sized> ChatClient for Arc<C> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }
}

/// Retries transport failures with exponential backoff. An empty completion
/// is a generation error and is not retried.
pub fn complete_with_retry(
    client: &dyn ChatClient,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<String> {
    let mut attempt = 0;
    loop {
        match client.complete(request) {
            Ok(text) if text.trim().is_empty() => {
                return Err(Error::Generation("empty completion".into()))
            }
            Ok(text) => return Ok(text),
            Err(Error::Transport(msg)) if attempt < policy.max_retries => {
                log::warn!("chat completion attempt {} failed: {msg}", attempt + 1);
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(Error::Transport(msg)) => {
                return Err(Error::Transport(format!(
                    "giving up after {} attempts: {msg}",
                    attempt + 1
                )))
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmClientConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 120,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }
}

#[cfg(feature = "http")]
pub use http::OpenAiClient;

#[cfg(feature = "http")]
mod http {
    use super::*;

    #[derive(Serialize)]
    struct RequestBody<'a> {
        model: &'a str,
        messages: &'a [ChatMessage],
        temperature: f64,
    }

    #[derive(Deserialize)]
    struct ResponseBody {
        choices: Vec<Choice>,
    }

    #[derive(Deserialize)]
    struct Choice {
        message: ChatMessage,
    }

    /// Client for OpenAI-compatible `/chat/completions` endpoints.
    pub struct OpenAiClient {
        config: LlmClientConfig,
        http: reqwest::blocking::Client,
    }

    impl OpenAiClient {
        pub fn new(config: LlmClientConfig) -> Result<Self> {
            config.validate()?;
            let http = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(config.timeout_secs))
                .build()
                .map_err(|e| Error::Transport(e.to_string()))?;
            Ok(Self { config, http })
        }

        pub fn config(&self) -> &LlmClientConfig {
            &self.config
        }
    }

    impl ChatClient for OpenAiClient {
        fn model_id(&self) -> &str {
            &self.config.model
        }

        fn complete(&self, request: &ChatRequest) -> Result<String> {
            let url = format!(
                "{}/chat/completions",
                self.config.base_url.trim_end_matches('/')
            );
            let body = RequestBody {
                model: &self.config.model,
                messages: &request.messages,
                temperature: request.temperature,
            };
            if log::log_enabled!(log::Level::Debug) {
                log::debug!("POST {url} {}", serde_json::to_string(&body)?);
            }
            let mut req = self.http.post(&url).json(&body);
            if let Ok(key) = std::env::var(&self.config.api_key_env) {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
            log::debug!("response {status}: {text}");
            if status.is_server_error() || status.as_u16() == 429 {
                return Err(Error::Transport(format!("endpoint returned {status}")));
            }
            if !status.is_success() {
                return Err(Error::Generation(format!(
                    "endpoint returned {status}: {text}"
                )));
            }
            let parsed: ResponseBody = serde_json::from_str(&text)
                .map_err(|e| Error::Generation(format!("malformed completion body: {e}")))?;
            parsed
                .choices
                .into_iter()
                .next()
                .map(|c| c.message.content)
                .ok_or_else(|| Error::Generation("completion has no choices".into()))
        }
    }
}

/// Offline client. Replies are chosen in this order: a scripted reply queue,
/// canned completions keyed by the hash of the final user message, the first
/// matching substring rule, and finally an echo of the final user message.
#[derive(Default)]
pub struct MockClient {
    model: String,
    canned: HashMap<u64, String>,
    rules: Vec<(String, String)>,
    script: Mutex<VecDeque<String>>,
    failures_left: AtomicUsize,
    calls: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

pub const MOCK_ECHO_PREFIX: &str = "[mock echo] ";
pub const MOCK_SCORE_LINE: &str = "Faithfulness: 4 | Completeness: 3 | Accuracy: 4";

impl MockClient {
    pub fn echo() -> Self {
        Self {
            model: "mock-echo".into(),
            ..Self::default()
        }
    }

    /// Echoes explanation prompts and answers debugger prompts with a fixed
    /// score line.
    pub fn pipeline() -> Self {
        Self::echo().with_rule(crate::debugger::DEBUGGER_PROMPT_MARKER, MOCK_SCORE_LINE)
    }

    pub fn with_model(mut self, model: &str) -> Self {
        self.model = model.to_string();
        self
    }

    pub fn with_canned(mut self, prompt: &str, completion: &str) -> Self {
        self.canned
            .insert(fnv1a64(prompt.as_bytes()), completion.to_string());
        self
    }

    pub fn with_rule(mut self, needle: &str, completion: &str) -> Self {
        self.rules
            .push((needle.to_string(), completion.to_string()));
        self
    }

    pub fn with_script<I, S>(self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.script
            .lock()
            .unwrap()
            .extend(replies.into_iter().map(Into::into));
        self
    }

    /// The next `n` calls fail with a transport error.
    pub fn failing(self, n: usize) -> Self {
        self.failures_left.store(n, Ordering::SeqCst);
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatClient for MockClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().unwrap().push(request.clone());
        if self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(Error::Transport("injected mock failure".into()));
        }
        if let Some(reply) = self.script.lock().unwrap().pop_front() {
            return Ok(reply);
        }
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if let Some(c) = self.canned.get(&fnv1a64(prompt.as_bytes())) {
            return Ok(c.clone());
        }
        let all: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect();
        if let Some((_, c)) = self
            .rules
            .iter()
            .find(|(needle, _)| all.contains(needle.as_str()))
        {
            return Ok(c.clone());
        }
        Ok(format!("{MOCK_ECHO_PREFIX}{prompt}"))
    }
}

/// A client whose every call fails with a transport error.
pub struct UnreachableClient;

impl ChatClient for UnreachableClient {
    fn model_id(&self) -> &str {
        "unreachable"
    }

    fn complete(&self, _request: &ChatRequest) -> Result<String> {
        Err(Error::Transport("connection refused".into()))
    }
}
