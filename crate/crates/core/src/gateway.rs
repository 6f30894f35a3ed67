//! Chat-completion gateway shared by the injector, verifier and detector.
//!
//! A [`Gateway`] owns the endpoint registry, the retry policy and an optional
//! request budget; the transport is a [`ChatBackend`]. Production uses
//! [`OpenAiBackend`]; tests and offline runs use [`MockBackend`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub id: String,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Optional system message sent before the user prompt.
    #[serde(default)]
    pub system: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// When false, `n > 1` is emulated with repeated single-sample calls.
    #[serde(default = "default_true")]
    pub supports_n: bool,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_true() -> bool {
    true
}

impl EndpointConfig {
    pub fn mock(id: &str) -> EndpointConfig {
        EndpointConfig {
            id: id.to_string(),
            base_url: "mock://".into(),
            model: format!("mock-{id}"),
            api_key_env: None,
            system: None,
            timeout_secs: default_timeout_secs(),
            supports_n: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("failed to read endpoint registry: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid endpoint registry: {0}")]
    Parse(String),
    #[error("duplicate endpoint id {0:?}")]
    Duplicate(String),
}

/// Endpoint registry file: a list of `[[endpoints]]` tables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Registry {
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default)]
    pub retrievers: Vec<crate::retrieval::RetrieverConfig>,
}

impl Registry {
    pub fn from_path(path: &Path) -> Result<Registry, RegistryError> {
        Registry::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Registry, RegistryError> {
        let reg: Registry = toml::from_str(text).map_err(|e| RegistryError::Parse(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        let ids = reg.endpoints.iter().map(|e| &e.id).chain(reg.retrievers.iter().map(|r| &r.id));
        for id in ids {
            if !seen.insert(id.clone()) {
                return Err(RegistryError::Duplicate(id.clone()));
            }
        }
        Ok(reg)
    }

    pub fn retriever(&self, id: &str) -> Option<&crate::retrieval::RetrieverConfig> {
        self.retrievers.iter().find(|r| r.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&EndpointConfig> {
        self.endpoints.iter().find(|e| e.id == id)
    }

    pub fn insert(&mut self, endpoint: EndpointConfig) {
        self.endpoints.retain(|e| e.id != endpoint.id);
        self.endpoints.push(endpoint);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub endpoint_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub n_samples: u32,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(endpoint_id: &str, prompt: String, temperature: f64, n_samples: u32) -> Self {
        CompletionRequest {
            endpoint_id: endpoint_id.to_string(),
            prompt,
            temperature,
            n_samples,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n_samples < 1 {
            return Err(GatewayError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.temperature == 0.0 && self.n_samples != 1 {
            return Err(GatewayError::InvalidRequest(
                "temperature 0 requires n_samples = 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub texts: Vec<String>,
    pub endpoint_id: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("endpoint {endpoint} failed after {attempts} attempt(s): {message}")]
    Endpoint {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("authentication failed for endpoint {endpoint}: {message}")]
    Auth { endpoint: String, message: String },
    #[error("request budget of {limit} exhausted")]
    BudgetExceeded { limit: u64 },
}

/// Failure of a single transport attempt.
#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code == 408 || *code == 429 || *code >= 500,
            BackendError::Malformed(_) | BackendError::MissingCredential(_) => false,
        }
    }

    fn is_auth(&self) -> bool {
        matches!(
            self,
            BackendError::MissingCredential(_) | BackendError::Status { code: 401 | 403, .. }
        )
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Performs one attempt and returns exactly `req.n_samples` texts.
    async fn chat(
        &self,
        endpoint: &EndpointConfig,
        req: &CompletionRequest,
    ) -> Result<Vec<String>, BackendError>;
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            factor: 1.0,
            jitter: 0.0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * self.factor.powi(retry as i32 - 1);
        let scale = if self.jitter > 0.0 {
            rand::rng().random_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }
}

pub struct Gateway {
    registry: Registry,
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    budget: Option<u64>,
    used: AtomicU64,
}

impl Gateway {
    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn new(registry: Registry, backend: Arc<dyn ChatBackend>) -> Gateway {
        Gateway {
            registry,
            backend,
            retry: RetryPolicy::default(),
            budget: None,
            used: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Caps the total number of transport attempts.
    pub fn with_budget(mut self, max_requests: u64) -> Self {
        self.budget = Some(max_requests);
        self
    }

    pub fn endpoint(&self, id: &str) -> Result<&EndpointConfig, GatewayError> {
        self.registry
            .get(id)
            .ok_or_else(|| GatewayError::UnknownEndpoint(id.to_string()))
    }

    pub fn requests_used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    fn take_budget(&self) -> Result<(), GatewayError> {
        match self.budget {
            None => {
                self.used.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Some(limit) => self
                .used
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| (u < limit).then_some(u + 1))
                .map(|_| ())
                .map_err(|_| GatewayError::BudgetExceeded { limit }),
        }
    }

    pub async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        req.validate()?;
        let endpoint = self.endpoint(&req.endpoint_id)?;
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            self.take_budget()?;
            attempt += 1;
            match self.backend.chat(endpoint, req).await {
                Ok(texts) if texts.len() == req.n_samples as usize => {
                    return Ok(CompletionResult {
                        texts,
                        endpoint_id: req.endpoint_id.clone(),
                        latency: started.elapsed(),
                        attempt_count: attempt,
                    })
                }
                Ok(texts) => {
                    return Err(GatewayError::Endpoint {
                        endpoint: req.endpoint_id.clone(),
                        attempts: attempt,
                        message: format!("expected {} completions, got {}", req.n_samples, texts.len()),
                    })
                }
                Err(e) if e.is_auth() => {
                    return Err(GatewayError::Auth {
                        endpoint: req.endpoint_id.clone(),
                        message: e.to_string(),
                    })
                }
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    tracing::warn!(endpoint = %req.endpoint_id, attempt, error = %e, ?delay, "retrying");
                    tokio::time::sleep(delay).await;
                }
                Err(e) => {
                    return Err(GatewayError::Endpoint {
                        endpoint: req.endpoint_id.clone(),
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    /// Runs requests with at most `max_in_flight` outstanding. Results are
    /// positionally aligned with `reqs`; failures stay in their slot.
    pub async fn complete_batch(
        &self,
        reqs: &[CompletionRequest],
        max_in_flight: usize,
    ) -> Vec<Result<CompletionResult, GatewayError>> {
        stream::iter(reqs.iter().map(|r| self.complete(r)))
            .buffered(max_in_flight.max(1))
            .collect()
            .await
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    index: Option<u32>,
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible `POST /v1/chat/completions` transport.
#[derive(Clone, Default)]
pub struct OpenAiBackend {
    client: reqwest::Client,
}

impl OpenAiBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chat_url(base_url: &str) -> String {
        let base = base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }

    async fn post(
        &self,
        endpoint: &EndpointConfig,
        req: &CompletionRequest,
        n: u32,
    ) -> Result<Vec<String>, BackendError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &endpoint.system {
            messages.push(ChatMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(ChatMessage {
            role: "user",
            content: &req.prompt,
        });
        let body = ChatBody {
            model: &endpoint.model,
            messages,
            temperature: req.temperature,
            n,
            max_tokens: req.max_tokens,
            seed: req.seed,
        };
        let mut builder = self
            .client
            .post(Self::chat_url(&endpoint.base_url))
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .json(&body);
        if let Some(var) = &endpoint.api_key_env {
            let key = std::env::var(var).map_err(|_| BackendError::MissingCredential(var.clone()))?;
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(map_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::Status {
                code: status.as_u16(),
                body,
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .await
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let mut choices = parsed.choices;
        choices.sort_by_key(|c| c.index.unwrap_or(0));
        if choices.len() < n as usize {
            return Err(BackendError::Malformed(format!(
                "asked for {n} choices, got {}",
                choices.len()
            )));
        }
        Ok(choices
            .into_iter()
            .take(n as usize)
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}

fn map_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    async fn chat(
        &self,
        endpoint: &EndpointConfig,
        req: &CompletionRequest,
    ) -> Result<Vec<String>, BackendError> {
        if endpoint.supports_n || req.n_samples == 1 {
            return self.post(endpoint, req, req.n_samples).await;
        }
        let mut texts = Vec::with_capacity(req.n_samples as usize);
        for _ in 0..req.n_samples {
            texts.extend(self.post(endpoint, req, 1).await?);
        }
        Ok(texts)
    }
}

/// SHA-256 of the prompt, lowercase hex. Keys `by_hash` mock entries.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// One scripted reply: completions, or a transport failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Texts(Vec<String>),
    Error { error: MockFailure },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockFailure {
    Status(u16),
    Kind(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub replies: Vec<MockReply>,
}

/// Scripted behaviour of one endpoint. Lookup order: `by_hash`, `rules`
/// (first match), `sequence` (by request ordinal), `default`.
///
/// Keyed reply lists advance once per matching call and stick on their last
/// entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockEndpointScript {
    #[serde(default)]
    pub by_hash: HashMap<String, Vec<MockReply>>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub sequence: Vec<MockReply>,
    #[serde(default)]
    pub default: Option<MockReply>,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub endpoints: HashMap<String, MockEndpointScript>,
}

impl MockScript {
    pub fn from_path(path: &Path) -> Result<MockScript, RegistryError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| RegistryError::Parse(e.to_string()))
    }
}

/// A request observed by the mock, in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub endpoint_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub n_samples: u32,
}

#[derive(Default)]
struct MockState {
    ordinals: HashMap<String, usize>,
    cursors: HashMap<String, usize>,
    calls: Vec<MockCall>,
}

/// Deterministic scripted backend with concurrency instrumentation.
pub struct MockBackend {
    script: MockScript,
    state: Mutex<MockState>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend {
            script,
            state: Mutex::new(MockState::default()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.state.lock().calls.clone()
    }

    fn pick(&self, endpoint_id: &str, prompt: &str) -> Option<MockReply> {
        let script = self.script.endpoints.get(endpoint_id)?;
        let mut state = self.state.lock();
        let ordinal = {
            let o = state.ordinals.entry(endpoint_id.to_string()).or_insert(0);
            *o += 1;
            *o - 1
        };
        let mut advance = |key: String, replies: &[MockReply]| -> Option<MockReply> {
            let cursor = state.cursors.entry(key).or_insert(0);
            let reply = replies.get((*cursor).min(replies.len().checked_sub(1)?)).cloned();
            *cursor += 1;
            reply
        };
        let hash = prompt_hash(prompt);
        if let Some(replies) = script.by_hash.get(&hash) {
            return advance(format!("{endpoint_id}\0hash\0{hash}"), replies);
        }
        if let Some((i, rule)) = script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| prompt.contains(&r.contains))
        {
            return advance(format!("{endpoint_id}\0rule\0{i}"), &rule.replies);
        }
        if let Some(reply) = script.sequence.get(ordinal) {
            return Some(reply.clone());
        }
        script.default.clone()
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn chat(
        &self,
        endpoint: &EndpointConfig,
        req: &CompletionRequest,
    ) -> Result<Vec<String>, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.state.lock().calls.push(MockCall {
            endpoint_id: endpoint.id.clone(),
            prompt: req.prompt.clone(),
            temperature: req.temperature,
            n_samples: req.n_samples,
        });
        let reply = self.pick(&endpoint.id, &req.prompt);
        let latency = self
            .script
            .endpoints
            .get(&endpoint.id)
            .map(|s| s.latency_ms)
            .unwrap_or(0);
        if latency > 0 {
            tokio::time::sleep(Duration::from_millis(latency)).await;
        }
        self.in_flight.fetch_sub(1, Ordering::SeqCst);

        match reply {
            None => Err(BackendError::Malformed(format!(
                "mock script has no reply for endpoint {}",
                endpoint.id
            ))),
            Some(MockReply::Error { error }) => Err(match error {
                MockFailure::Status(code) => BackendError::Status {
                    code,
                    body: "scripted failure".into(),
                },
                MockFailure::Kind(kind) if kind == "timeout" => BackendError::Timeout,
                MockFailure::Kind(kind) => BackendError::Transport(kind),
            }),
            Some(MockReply::Texts(texts)) => {
                let n = req.n_samples as usize;
                if texts.len() < n {
                    return Err(BackendError::Malformed(format!(
                        "mock reply has {} completions, request wants {n}",
                        texts.len()
                    )));
                }
                Ok(texts.into_iter().take(n).collect())
            }
        }
    }
}
