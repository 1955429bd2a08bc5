//! Chat-completion and embedding provider clients.
//!
//! The wire protocol is the common OpenAI-style JSON shape:
//! `{model, messages: [{role, content}...], temperature}` for chat and
//! `{model, input: [str...]}` for embeddings. API keys come from
//! environment variables only, named in the run config.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Stable digest of the request body, used for cache bookkeeping.
    pub fn digest(&self) -> String {
        crate::dataset::sha256_hex(
            serde_json::to_string(self).expect("request serialization").as_bytes(),
        )
    }
}

/// A synchronous chat-completion backend. Implementations must be safe to
/// call from multiple worker threads.
pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    /// Returns the assistant message text for the request.
    fn complete(&self, request: &ChatRequest) -> Result<String>;
    /// Number of completed backend invocations (cache hits do not count).
    fn call_count(&self) -> u64;
}

/// A synchronous embedding backend.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn call_count(&self) -> u64;
}

/// Retry with exponential backoff and jitter. The jitter is derived from
/// the attempt counter so retries stay deterministic in tests.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.as_millis() as u64 * (1u64 << attempt.min(8));
        // Deterministic jitter in [0, exp/4).
        let jitter = (attempt as u64).wrapping_mul(0x9e37_79b9).wrapping_rem(exp / 4 + 1);
        Duration::from_millis(exp + jitter)
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut last = None;
        for attempt in 0..self.attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    last = Some(e);
                    if attempt + 1 < self.attempts {
                        std::thread::sleep(self.delay_for(attempt));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Token-bucket rate limiter, shared across worker threads.
pub struct TokenBucket {
    state: Mutex<BucketState>,
    capacity: f64,
    refill_per_sec: f64,
}

struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(requests_per_second: f64, burst: f64) -> Self {
        TokenBucket {
            state: Mutex::new(BucketState { tokens: burst, last: Instant::now() }),
            capacity: burst,
            refill_per_sec: requests_per_second,
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(s.last).as_secs_f64();
                s.tokens = (s.tokens + elapsed * self.refill_per_sec).min(self.capacity);
                s.last = now;
                if s.tokens >= 1.0 {
                    s.tokens -= 1.0;
                    None
                } else {
                    Some(Duration::from_secs_f64((1.0 - s.tokens) / self.refill_per_sec))
                }
            };
            match wait {
                None => return,
                Some(d) => std::thread::sleep(d),
            }
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// HTTP client for an OpenAI-compatible chat-completions endpoint.
pub struct HttpChatProvider {
    provider_id: String,
    model_id: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    bucket: Option<TokenBucket>,
    calls: AtomicU64,
}

impl HttpChatProvider {
    pub fn new(
        provider_id: impl Into<String>,
        model_id: impl Into<String>,
        endpoint: impl Into<String>,
        api_key_env: Option<&str>,
    ) -> Result<Self> {
        let provider_id = provider_id.into();
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!(
                    "provider `{}` needs API key in env var `{}`",
                    provider_id, var
                ))
            })?),
            None => None,
        };
        Ok(HttpChatProvider {
            provider_id,
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client build"),
            retry: RetryPolicy::default(),
            bucket: None,
            calls: AtomicU64::new(0),
        })
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        self.bucket = Some(TokenBucket::new(requests_per_second, requests_per_second.max(1.0)));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post_once(&self, request: &ChatRequest) -> Result<String> {
        if let Some(bucket) = &self.bucket {
            bucket.acquire();
        }
        let mut req = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Provider {
            provider: self.provider_id.clone(),
            message: e.to_string(),
        })?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let status = resp.status();
        let body = resp.text().map_err(|e| Error::Provider {
            provider: self.provider_id.clone(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(Error::Provider {
                provider: self.provider_id.clone(),
                message: format!("HTTP {}: {}", status, body),
            });
        }
        let parsed: ChatCompletionResponse =
            serde_json::from_str(&body).map_err(|e| Error::Provider {
                provider: self.provider_id.clone(),
                message: format!("malformed response: {}", e),
            })?;
        let text = parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .unwrap_or_default();
        if text.is_empty() {
            return Err(Error::Provider {
                provider: self.provider_id.clone(),
                message: "empty completion".into(),
            });
        }
        Ok(text)
    }
}

impl ChatProvider for HttpChatProvider {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.retry.run(|| self.post_once(request))
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// HTTP client for an OpenAI-compatible embeddings endpoint.
pub struct HttpEmbeddingProvider {
    provider_id: String,
    model_id: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    calls: AtomicU64,
}

impl HttpEmbeddingProvider {
    pub fn new(
        provider_id: impl Into<String>,
        model_id: impl Into<String>,
        endpoint: impl Into<String>,
        api_key_env: Option<&str>,
    ) -> Result<Self> {
        let provider_id = provider_id.into();
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!(
                    "provider `{}` needs API key in env var `{}`",
                    provider_id, var
                ))
            })?),
            None => None,
        };
        Ok(HttpEmbeddingProvider {
            provider_id,
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("client build"),
            retry: RetryPolicy::default(),
            calls: AtomicU64::new(0),
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        self.retry.run(|| {
            let body = EmbeddingRequest { model: &self.model_id, input: vec![text] };
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| Error::Provider {
                provider: self.provider_id.clone(),
                message: e.to_string(),
            })?;
            self.calls.fetch_add(1, Ordering::Relaxed);
            let parsed: EmbeddingResponse = resp.json().map_err(|e| Error::Provider {
                provider: self.provider_id.clone(),
                message: format!("malformed embedding response: {}", e),
            })?;
            parsed
                .data
                .into_iter()
                .next()
                .map(|d| d.embedding)
                .ok_or_else(|| Error::Provider {
                    provider: self.provider_id.clone(),
                    message: "empty embedding response".into(),
                })
        })
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

pub mod mock;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_succeeds_after_transient_failures() {
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        let mut remaining_failures = 2;
        let out = policy.run(|| {
            if remaining_failures > 0 {
                remaining_failures -= 1;
                Err(Error::Provider { provider: "t".into(), message: "boom".into() })
            } else {
                Ok(7)
            }
        });
        assert_eq!(out.unwrap(), 7);
    }

    #[test]
    fn retry_gives_up_after_budget() {
        let policy = RetryPolicy { attempts: 2, base_delay: Duration::from_millis(1) };
        let out: Result<()> =
            policy.run(|| Err(Error::Provider { provider: "t".into(), message: "down".into() }));
        assert!(out.is_err());
    }

    #[test]
    fn token_bucket_spaces_requests() {
        let bucket = TokenBucket::new(1000.0, 2.0);
        let start = Instant::now();
        for _ in 0..4 {
            bucket.acquire();
        }
        // Two from the burst, two refilled at 1ms each.
        assert!(start.elapsed() >= Duration::from_millis(1));
    }
}
