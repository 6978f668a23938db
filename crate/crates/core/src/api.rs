//! Blocking client for OpenAI-compatible `/v1/chat/completions` and
//! `/v1/completions` routes, with exponential-backoff retries.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{Error, Result};

/// Environment variable consulted for the bearer token.
pub const API_KEY_ENV: &str = "UNLEARN_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << retry.min(32))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Clone)]
pub struct ApiClient {
    base: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ApiClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApiClient")
            .field("base", &self.base)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl ApiClient {
    /// `endpoint` is the server root, with or without a trailing `/v1`.
    pub fn new(endpoint: &str, api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Result<Self> {
        let trimmed = endpoint.trim_end_matches('/');
        if !(trimmed.starts_with("http://") || trimmed.starts_with("https://")) {
            return Err(Error::Config(format!("endpoint must be an http(s) URL, got {endpoint:?}")));
        }
        if retry.max_attempts == 0 {
            return Err(Error::Config("retry.max_attempts must be at least 1".into()));
        }
        let base = trimmed.strip_suffix("/v1").unwrap_or(trimmed).to_string();
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Ok(Self {
            base,
            api_key,
            retry,
            agent,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn chat(&self, model: &str, messages: &[ChatMessage], temperature: f64) -> Result<String> {
        let body = json!({ "model": model, "messages": messages, "temperature": temperature });
        let reply = self.post("/v1/chat/completions", &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::ExternalService("chat reply has no choices[0].message.content".into()))
    }

    pub fn complete(&self, model: &str, prompt: &str, temperature: f64) -> Result<String> {
        let body = json!({ "model": model, "prompt": prompt, "temperature": temperature });
        let reply = self.post("/v1/completions", &body)?;
        reply
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::ExternalService("completion reply has no choices[0].text".into()))
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value> {
        let url = format!("{}{route}", self.base);
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let delay = self.retry.backoff(attempt - 1);
                log::debug!("retrying {url} in {delay:?} ({last})");
                std::thread::sleep(delay);
            }
            match self.attempt(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(msg)) => return Err(Error::ExternalService(format!("{url}: {msg}"))),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::ExternalService(format!(
            "{url}: giving up after {} attempts: {last}",
            self.retry.max_attempts
        )))
    }

    fn attempt(&self, url: &str, body: &Value) -> std::result::Result<Value, Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 200 {
            return resp
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| Attempt::Retry(format!("bad JSON body: {e}")));
        }
        let msg = format!("HTTP {status}");
        // Client errors other than timeouts and rate limits will not improve.
        if (400..500).contains(&status) && status != 408 && status != 429 {
            Err(Attempt::Fatal(msg))
        } else {
            Err(Attempt::Retry(msg))
        }
    }
}
