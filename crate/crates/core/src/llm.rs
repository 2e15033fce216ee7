//! Chat-completion client with a file-backed response cache.
//!
//! Every reply is stored under `sha256(model, prompt)` as one JSON file, so a
//! directory of recorded replies (cassettes) lets the whole pipeline run
//! offline and byte-for-byte reproducibly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
            Self::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Canonical text form of a conversation; this is what gets hashed.
pub fn render_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str("<|");
        out.push_str(m.role.as_str());
        out.push_str("|>\n");
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

pub fn cache_key(model: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Per-million-token prices in dollars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pricing {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        // gpt-3.5-turbo list prices.
        Self {
            input_per_million: 0.5,
            output_per_million: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
        }
    }

    /// `input/1M * input_price + output/1M * output_price`.
    pub fn estimated_cost(&self, pricing: &Pricing) -> f64 {
        self.input_tokens as f64 / 1e6 * pricing.input_per_million
            + self.output_tokens as f64 / 1e6 * pricing.output_per_million
    }
}

impl std::ops::Add for TokenUsage {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub temperature: f64,
    pub messages: &'a [ChatMessage],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Something that can answer a chat request: an HTTP endpoint or a test
/// double.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest<'_>) -> Result<ChatReply, TransportError>;
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("offline mode and no recorded reply for key {key}")]
    OfflineCacheMiss { key: String },
    #[error("response cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

/// A recorded reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cassette {
    pub model: String,
    pub prompt: String,
    pub content: String,
    pub usage: TokenUsage,
}

/// Directory of cassettes, one file per key. Writes go through a temporary
/// file and a rename so concurrent readers never see a partial file.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Cassette>, LlmError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| LlmError::Cache {
                path,
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LlmError::Cache {
                path,
                reason: e.to_string(),
            }),
        }
    }

    pub fn put(&self, key: &str, cassette: &Cassette) -> Result<(), LlmError> {
        let path = self.path_for(key);
        let cache_err = |e: std::io::Error| LlmError::Cache {
            path: path.clone(),
            reason: e.to_string(),
        };
        fs::create_dir_all(&self.dir).map_err(cache_err)?;
        let tmp = self.dir.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let mut body = serde_json::to_vec_pretty(cassette).expect("cassette serializes");
        body.push(b'\n');
        let mut f = fs::File::create(&tmp).map_err(cache_err)?;
        f.write_all(&body).map_err(cache_err)?;
        drop(f);
        fs::rename(&tmp, &path).map_err(cache_err)
    }
}

/// Spaces out network requests to at most `per_second` per second.
#[derive(Debug)]
struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(per_second: Option<f64>) -> Self {
        let interval = per_second
            .filter(|r| *r > 0.0 && r.is_finite())
            .map(|r| Duration::from_secs_f64(1.0 / r));
        Self {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub content: String,
    pub usage: TokenUsage,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptions {
    pub max_retries: u32,
    pub backoff: Duration,
    pub requests_per_second: Option<f64>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(500),
            requests_per_second: None,
        }
    }
}

/// Cached chat client shared by segmentation and parsing.
pub struct LlmClient {
    transport: Option<Arc<dyn ChatTransport>>,
    cache: Option<ResponseCache>,
    options: ClientOptions,
    limiter: RateLimiter,
    network_requests: AtomicUsize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("online", &self.transport.is_some())
            .field("cache", &self.cache)
            .field("options", &self.options)
            .finish()
    }
}

impl LlmClient {
    pub fn new(
        transport: Option<Arc<dyn ChatTransport>>,
        cache: Option<ResponseCache>,
        options: ClientOptions,
    ) -> Self {
        let limiter = RateLimiter::new(options.requests_per_second);
        Self {
            transport,
            cache,
            options,
            limiter,
            network_requests: AtomicUsize::new(0),
        }
    }

    /// Replays cassettes only; any cache miss is an error.
    pub fn offline(cache: ResponseCache) -> Self {
        Self::new(None, Some(cache), ClientOptions::default())
    }

    pub fn is_online(&self) -> bool {
        self.transport.is_some()
    }

    /// Requests that actually reached the transport, retries included.
    pub fn network_requests(&self) -> usize {
        self.network_requests.load(Ordering::Relaxed)
    }

    pub fn complete(&self, model: &str, temperature: f64, messages: &[ChatMessage]) -> Result<Completion, LlmError> {
        let prompt = render_messages(messages);
        let key = cache_key(model, &prompt);
        if let Some(cache) = &self.cache {
            if let Some(c) = cache.get(&key)? {
                return Ok(Completion {
                    content: c.content,
                    usage: c.usage,
                    cached: true,
                });
            }
        }
        let Some(transport) = &self.transport else {
            return Err(LlmError::OfflineCacheMiss { key });
        };
        let request = ChatRequest {
            model,
            temperature,
            messages,
        };
        let attempts = self.options.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.options.backoff * (1 << (attempt - 1).min(6)));
            }
            self.limiter.acquire();
            self.network_requests.fetch_add(1, Ordering::Relaxed);
            match transport.send(&request) {
                Ok(reply) => {
                    if let Some(cache) = &self.cache {
                        cache.put(
                            &key,
                            &Cassette {
                                model: model.to_string(),
                                prompt,
                                content: reply.content.clone(),
                                usage: reply.usage,
                            },
                        )?;
                    }
                    return Ok(Completion {
                        content: reply.content,
                        usage: reply.usage,
                        cached: false,
                    });
                }
                Err(e) => {
                    log::warn!("chat request attempt {} failed: {e}", attempt + 1);
                    last = e.0;
                }
            }
        }
        Err(LlmError::Transport {
            attempts,
            message: last,
        })
    }
}

/// OpenAI-style `/chat/completions` endpoint over blocking HTTP.
#[cfg(feature = "http")]
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
        }
    }

    /// Reads the API key from `env_var`; a missing variable is allowed for
    /// endpoints that need no key.
    pub fn from_env(endpoint: impl Into<String>, env_var: &str) -> Self {
        Self::new(endpoint, std::env::var(env_var).ok())
    }
}

#[cfg(feature = "http")]
impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest<'_>) -> Result<ChatReply, TransportError> {
        #[derive(Deserialize)]
        struct Usage {
            prompt_tokens: u64,
            completion_tokens: u64,
        }
        #[derive(Deserialize)]
        struct Message {
            content: String,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: Message,
        }
        #[derive(Deserialize)]
        struct Response {
            choices: Vec<Choice>,
            usage: Option<Usage>,
        }

        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| TransportError(e.to_string()))?;
        let body: Response = resp.body_mut().read_json().map_err(|e| TransportError(e.to_string()))?;
        let content = body
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError("reply has no choices".into()))?;
        let usage = body
            .usage
            .map(|u| TokenUsage::new(u.prompt_tokens, u.completion_tokens))
            .unwrap_or_default();
        Ok(ChatReply { content, usage })
    }
}

/// Transport that answers from a closure; handy in tests and examples.
pub struct FnTransport<F>(pub F);

impl<F> ChatTransport for FnTransport<F>
where
    F: Fn(&ChatRequest<'_>) -> Result<ChatReply, TransportError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest<'_>) -> Result<ChatReply, TransportError> {
        (self.0)(request)
    }
}
