//! Generation backends: an OpenAI-compatible HTTP client, a scripted mock,
//! and a closure-backed backend for tests, all behind [`Backend`].

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use promptflow_core::generation::RequestError;
use promptflow_core::GenerationRequest;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    /// HTTP attempts used, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("still rate limited after {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("server error HTTP {status} after {attempts} attempts")]
    ServerError { status: u16, attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(#[from] RequestError),
    #[error("mock script has no response for request {hash} (call #{index})")]
    Unscripted { hash: String, index: u64 },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self { max_attempts: 4, base_backoff_ms: 500 }
    }
}

impl RetryConfig {
    /// Delay before retry number `retry` (1-based): base * 2^(retry-1),
    /// saturating.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub api_key_env_name: String,
    pub model: String,
    pub max_parallel: usize,
    pub retry: RetryConfig,
    pub timeout_ms: u64,
    pub max_tokens: u32,
    /// Script for the mock backend.
    pub mock_script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: "http://localhost:8000/v1".into(),
            api_key_env_name: "PROMPTFLOW_API_KEY".into(),
            model: "gpt-4".into(),
            max_parallel: 8,
            retry: RetryConfig::default(),
            timeout_ms: 60_000,
            max_tokens: 1024,
            mock_script: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_parallel < 1 {
            return Err("backend.max_parallel must be >= 1".into());
        }
        if self.retry.max_attempts < 1 {
            return Err("backend.retry.max_attempts must be >= 1".into());
        }
        if self.max_tokens == 0 {
            return Err("backend.max_tokens must be >= 1".into());
        }
        if self.kind == BackendKind::Mock && self.mock_script.is_none() {
            return Err("backend.mock_script is required for the mock backend".into());
        }
        Ok(())
    }
}

/// Token totals across every call made through one backend.
#[derive(Debug, Default)]
pub struct UsageCounter {
    prompt: AtomicU64,
    completion: AtomicU64,
    calls: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
}

impl UsageCounter {
    pub fn record(&self, r: &GenerationResponse) {
        self.prompt.fetch_add(r.prompt_tokens, Ordering::Relaxed);
        self.completion.fetch_add(r.completion_tokens, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt.load(Ordering::Relaxed),
            completion_tokens: self.completion.load(Ordering::Relaxed),
            calls: self.calls.load(Ordering::Relaxed),
        }
    }
}

pub type GenerationResult = Result<GenerationResponse, BackendError>;

pub trait Backend: Sync {
    fn generate(&self, req: &GenerationRequest) -> GenerationResult;

    fn usage(&self) -> Usage;

    fn max_parallel(&self) -> usize {
        1
    }

    /// Results come back in input order; one failure does not affect the
    /// other items.
    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<GenerationResult> {
        run_bounded(reqs, self.max_parallel(), |_, r| self.generate(r))
    }
}

/// Runs `f` over `items` on at most `max_parallel` scoped threads and
/// returns the results in input order.
pub fn run_bounded<T: Sync, R: Send>(
    items: &[T],
    max_parallel: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    let workers = max_parallel.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

/// Hex SHA-256 over the canonical JSON of the request messages.
pub fn request_hash(req: &GenerationRequest) -> String {
    let canonical = serde_json::to_string(&req.messages).expect("messages serialize");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Whitespace token count; the mock's stand-in for a tokenizer.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptMatch {
    /// Exact request hash, see [`request_hash`].
    Hash(String),
    /// The n-th call (0-based) made through the backend.
    Index(u64),
    /// Any request whose message text contains the string.
    Contains(String),
    /// Fallback for everything else.
    Any(bool),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub response: String,
}

/// Deterministic backend driven by a script.
///
/// Lookup order: hash, call index, first `contains` entry in file order,
/// then `any`. Call indices are handed out in input order, also inside a
/// batch, so a replay sees the same indices.
#[derive(Debug, Default)]
pub struct MockBackend {
    entries: Vec<ScriptEntry>,
    calls: AtomicU64,
    usage: UsageCounter,
    transcript: Mutex<Vec<(u64, String)>>,
}

impl MockBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text)
            .map_err(|e| BackendError::Other(format!("invalid mock script: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Other(format!("cannot read mock script {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Request hashes in call order.
    pub fn transcript(&self) -> Vec<(u64, String)> {
        let mut t = self.transcript.lock().expect("transcript poisoned").clone();
        t.sort();
        t
    }

    fn lookup(&self, hash: &str, index: u64, text: &str) -> Option<&str> {
        let find = |pred: &dyn Fn(&ScriptMatch) -> bool| {
            self.entries.iter().find(|e| pred(&e.matcher)).map(|e| e.response.as_str())
        };
        find(&|m| matches!(m, ScriptMatch::Hash(h) if h == hash))
            .or_else(|| find(&|m| matches!(m, ScriptMatch::Index(i) if *i == index)))
            .or_else(|| find(&|m| matches!(m, ScriptMatch::Contains(s) if text.contains(s.as_str()))))
            .or_else(|| find(&|m| matches!(m, ScriptMatch::Any(true))))
    }

    fn answer(&self, req: &GenerationRequest, index: u64) -> GenerationResult {
        req.validate()?;
        let start = Instant::now();
        let hash = request_hash(req);
        let text = req.text();
        self.transcript.lock().expect("transcript poisoned").push((index, hash.clone()));
        let response = self
            .lookup(&hash, index, &text)
            .ok_or_else(|| BackendError::Unscripted { hash: hash.clone(), index })?;
        let r = GenerationResponse {
            text: response.to_string(),
            prompt_tokens: approx_tokens(&text),
            completion_tokens: approx_tokens(response),
            latency_ms: start.elapsed().as_millis() as u64,
            attempts: 1,
        };
        self.usage.record(&r);
        Ok(r)
    }
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> GenerationResult {
        let index = self.calls.fetch_add(1, Ordering::SeqCst);
        self.answer(req, index)
    }

    fn usage(&self) -> Usage {
        self.usage.snapshot()
    }

    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<GenerationResult> {
        let first = self.calls.fetch_add(reqs.len() as u64, Ordering::SeqCst);
        reqs.iter().enumerate().map(|(i, r)| self.answer(r, first + i as u64)).collect()
    }
}

type GenerateFn = dyn Fn(&GenerationRequest) -> Result<String, BackendError> + Sync + Send;

/// Backend whose answers come from a closure.
pub struct FnBackend {
    f: Box<GenerateFn>,
    max_parallel: usize,
    usage: UsageCounter,
}

impl FnBackend {
    pub fn new(f: impl Fn(&GenerationRequest) -> Result<String, BackendError> + Sync + Send + 'static) -> Self {
        Self { f: Box::new(f), max_parallel: 1, usage: UsageCounter::default() }
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }
}

impl Backend for FnBackend {
    fn generate(&self, req: &GenerationRequest) -> GenerationResult {
        req.validate()?;
        let start = Instant::now();
        let text = (self.f)(req)?;
        let r = GenerationResponse {
            prompt_tokens: approx_tokens(&req.text()),
            completion_tokens: approx_tokens(&text),
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            attempts: 1,
        };
        self.usage.record(&r);
        Ok(r)
    }

    fn usage(&self) -> Usage {
        self.usage.snapshot()
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    config: BackendConfig,
    usage: UsageCounter,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [promptflow_core::Message],
    temperature: f64,
    max_tokens: u32,
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in `config`.
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env_name).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without a bearer token", config.api_key_env_name);
        }
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let endpoint = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        Ok(Self { client, endpoint, api_key, config, usage: UsageCounter::default() })
    }

    fn attempt(&self, req: &GenerationRequest) -> Result<serde_json::Value, Attempt> {
        let model = if req.model.is_empty() { &self.config.model } else { &req.model };
        let body = ChatBody {
            model,
            messages: &req.messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Timeout
            } else {
                Attempt::Fatal(BackendError::Transport(e.to_string()))
            }
        })?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .json::<serde_json::Value>()
                .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string()))),
            401 | 403 => Err(Attempt::Fatal(BackendError::Auth(status))),
            429 => Err(Attempt::RateLimited),
            500..=599 => Err(Attempt::Server(status)),
            _ => Err(Attempt::Fatal(BackendError::Http { status, body: resp.text().unwrap_or_default() })),
        }
    }
}

enum Attempt {
    RateLimited,
    Server(u16),
    Timeout,
    Fatal(BackendError),
}

/// Extracts the message text and token usage from a completion body.
pub fn parse_completion(body: &serde_json::Value) -> Result<(String, u64, u64), BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?;
    let count = |key: &str| body.get("usage").and_then(|u| u.get(key)).and_then(|v| v.as_u64());
    let (p, c) = (count("prompt_tokens"), count("completion_tokens"));
    if p.is_none() || c.is_none() {
        log::warn!("response has no usage counts; recording 0 tokens");
    }
    Ok((text.to_string(), p.unwrap_or(0), c.unwrap_or(0)))
}

impl Backend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> GenerationResult {
        req.validate()?;
        let start = Instant::now();
        let retry = self.config.retry;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let failure = match self.attempt(req) {
                Ok(body) => {
                    let (text, prompt_tokens, completion_tokens) = parse_completion(&body)?;
                    let r = GenerationResponse {
                        text,
                        prompt_tokens,
                        completion_tokens,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempts,
                    };
                    self.usage.record(&r);
                    return Ok(r);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(other) => other,
            };
            if attempts >= retry.max_attempts {
                return Err(match failure {
                    Attempt::RateLimited => BackendError::RateLimitedExhausted { attempts },
                    Attempt::Timeout => BackendError::Timeout { attempts },
                    Attempt::Server(status) => BackendError::ServerError { status, attempts },
                    Attempt::Fatal(e) => e,
                });
            }
            let delay = retry.backoff(attempts);
            log::debug!("retrying in {delay:?} (attempt {attempts} of {})", retry.max_attempts);
            std::thread::sleep(delay);
        }
    }

    fn usage(&self) -> Usage {
        self.usage.snapshot()
    }

    fn max_parallel(&self) -> usize {
        self.config.max_parallel
    }
}

/// Builds the backend named by `config`.
pub fn from_config(config: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
    match config.kind {
        BackendKind::Mock => {
            let path = config
                .mock_script
                .as_deref()
                .ok_or_else(|| BackendError::Other("mock backend needs a mock_script".into()))?;
            Ok(Box::new(MockBackend::from_file(path)?))
        }
        BackendKind::Http => Ok(Box::new(HttpBackend::new(config.clone())?)),
    }
}
