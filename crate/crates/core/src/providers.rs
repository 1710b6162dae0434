//! Chat-completion clients behind one contract.
//!
//! Two HTTP wire dialects are supported (OpenAI-compatible `chat/completions`
//! and a native JSON-mode `generateContent` style endpoint) plus a
//! deterministic in-process mock. Every call goes through [`complete_with`],
//! which applies the per-model concurrency cap, the request deadline, failure
//! classification, and exponential backoff with jitter.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderKind {
    OpenAICompatible,
    NativeJsonProvider,
    Mock,
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_output_tokens() -> u32 {
    8192
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_true() -> bool {
    true
}
fn default_max_concurrent() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub provider_kind: ProviderKind,
    #[serde(default)]
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the key, never the key.
    #[serde(default)]
    pub api_key_ref: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_true")]
    pub json_mode: bool,
    /// In-flight request cap for this model.
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    /// Scripted responses, used only by [`ProviderKind::Mock`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockScript>,
}

impl ModelSpec {
    pub fn mock(model_id: &str, script: MockScript) -> Self {
        ModelSpec {
            provider_kind: ProviderKind::Mock,
            base_url: String::new(),
            model_id: model_id.to_string(),
            api_key_ref: String::new(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            timeout_ms: default_timeout_ms(),
            json_mode: true,
            max_concurrent: default_max_concurrent(),
            mock: Some(script),
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.model_id.trim().is_empty() {
            return Err(SpecError::Invalid("model_id must be nonempty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(SpecError::Invalid("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 || self.timeout_ms == 0 || self.max_concurrent == 0 {
            return Err(SpecError::Invalid(
                "max_output_tokens, timeout_ms and max_concurrent must be positive".into(),
            ));
        }
        if self.provider_kind != ProviderKind::Mock {
            let url = reqwest::Url::parse(&self.base_url)
                .map_err(|e| SpecError::Invalid(format!("base_url {:?}: {e}", self.base_url)))?;
            if !matches!(url.scheme(), "http" | "https") {
                return Err(SpecError::Invalid(format!(
                    "base_url must be http(s), got {:?}",
                    self.base_url
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("invalid model spec: {0}")]
    Invalid(String),
    #[error("environment variable {0:?} named by api_key_ref is not set")]
    MissingSecret(String),
    #[error("mock provider requires a `mock` script")]
    MissingMockScript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub json_mode: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    /// Model message content for 2xx responses, the raw body otherwise.
    pub body_text: String,
    pub finish_reason: FinishReason,
    pub http_status: u16,
    pub prompt_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorClass {
    QuotaExceeded,
    Truncated,
    NetworkError,
    AuthError,
    MalformedResponse,
    Timeout,
}

impl ErrorClass {
    pub fn default_retryable(self) -> bool {
        !matches!(self, ErrorClass::AuthError)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::QuotaExceeded => "QuotaExceeded",
            ErrorClass::Truncated => "Truncated",
            ErrorClass::NetworkError => "NetworkError",
            ErrorClass::AuthError => "AuthError",
            ErrorClass::MalformedResponse => "MalformedResponse",
            ErrorClass::Timeout => "Timeout",
        }
    }
}

impl std::fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{class}: {detail}")]
pub struct ProviderError {
    pub class: ErrorClass,
    pub detail: String,
    pub retryable: bool,
}

impl ProviderError {
    pub fn new(class: ErrorClass, detail: impl Into<String>) -> Self {
        ProviderError {
            class,
            detail: detail.into(),
            retryable: class.default_retryable(),
        }
    }

    pub fn fatal(class: ErrorClass, detail: impl Into<String>) -> Self {
        ProviderError {
            retryable: false,
            ..Self::new(class, detail)
        }
    }
}

/// Maps a finished exchange to a failure class, or `None` when usable.
///
/// 5xx responses count as network failures; other unexpected statuses are
/// malformed and not retried.
pub fn classify_failure(resp: &RawResponse) -> Option<ProviderError> {
    let status = resp.http_status;
    let snippet: String = resp.body_text.chars().take(300).collect();
    match status {
        429 => Some(ProviderError::new(
            ErrorClass::QuotaExceeded,
            format!("HTTP 429: {snippet}"),
        )),
        401 | 403 => Some(ProviderError::new(
            ErrorClass::AuthError,
            format!("HTTP {status}: {snippet}"),
        )),
        500..=599 => Some(ProviderError::new(
            ErrorClass::NetworkError,
            format!("HTTP {status}: {snippet}"),
        )),
        200..=299 => {
            if resp.finish_reason == FinishReason::Length {
                Some(ProviderError::new(
                    ErrorClass::Truncated,
                    format!(
                        "output hit max_output_tokens after {} chars",
                        resp.body_text.chars().count()
                    ),
                ))
            } else if resp.body_text.trim().is_empty() {
                Some(ProviderError::new(
                    ErrorClass::MalformedResponse,
                    "empty response body",
                ))
            } else {
                None
            }
        }
        _ => Some(ProviderError::fatal(
            ErrorClass::MalformedResponse,
            format!("HTTP {status}: {snippet}"),
        )),
    }
}

fn default_max_attempts() -> u32 {
    4
}
fn default_base_delay_ms() -> u64 {
    500
}
fn default_backoff_factor() -> f64 {
    2.0
}
fn default_jitter_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default = "default_backoff_factor")]
    pub backoff_factor: f64,
    #[serde(default = "default_jitter_fraction")]
    pub jitter_fraction: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: default_max_attempts(),
            base_delay_ms: default_base_delay_ms(),
            backoff_factor: default_backoff_factor(),
            jitter_fraction: default_jitter_fraction(),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.max_attempts == 0 || self.base_delay_ms == 0 {
            return Err(SpecError::Invalid(
                "retry max_attempts and base_delay_ms must be positive".into(),
            ));
        }
        if self.backoff_factor.is_nan() || self.backoff_factor <= 1.0 {
            return Err(SpecError::Invalid("retry backoff_factor must be > 1".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_fraction) {
            return Err(SpecError::Invalid(
                "retry jitter_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Nominal delay after failed attempt `attempt` (1-based).
    pub fn nominal_delay_ms(&self, attempt: u32) -> f64 {
        self.base_delay_ms as f64 * self.backoff_factor.powi(attempt.saturating_sub(1) as i32)
    }

    /// Delay with jitter; `unit` in [-1, 1] scales the jitter band.
    pub fn delay_ms(&self, attempt: u32, unit: f64) -> u64 {
        let nominal = self.nominal_delay_ms(attempt);
        let jittered = nominal * (1.0 + self.jitter_fraction * unit.clamp(-1.0, 1.0));
        jittered.round().max(0.0) as u64
    }
}

/// One request/response exchange (or transport failure). Implementations do
/// not retry; that is [`complete_with`]'s job.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, spec: &ModelSpec, req: &ChatRequest) -> Result<RawResponse, ProviderError>;
}

/// A model endpoint with its concurrency cap.
pub struct Client {
    spec: ModelSpec,
    transport: Arc<dyn Transport>,
    limiter: Semaphore,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("spec", &self.spec).finish()
    }
}

impl Client {
    pub fn new(spec: ModelSpec, transport: Arc<dyn Transport>) -> Self {
        let limiter = Semaphore::new(spec.max_concurrent.max(1));
        Client {
            spec,
            transport,
            limiter,
        }
    }

    /// Builds the transport the spec asks for, reading the API key from the
    /// environment variable named by `api_key_ref`.
    pub fn from_spec(spec: ModelSpec) -> Result<Self, SpecError> {
        Self::from_spec_with_env(spec, |name| std::env::var(name).ok())
    }

    pub fn from_spec_with_env(
        spec: ModelSpec,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, SpecError> {
        spec.validate()?;
        let transport: Arc<dyn Transport> = match spec.provider_kind {
            ProviderKind::Mock => {
                let script = spec.mock.clone().ok_or(SpecError::MissingMockScript)?;
                Arc::new(MockProvider::new(script))
            }
            kind => {
                let secret = if spec.api_key_ref.is_empty() {
                    None
                } else {
                    Some(
                        env(&spec.api_key_ref)
                            .ok_or_else(|| SpecError::MissingSecret(spec.api_key_ref.clone()))?,
                    )
                };
                Arc::new(HttpTransport::new(kind, secret))
            }
        };
        Ok(Client::new(spec, transport))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// One attempt under the concurrency cap and deadline.
    pub async fn send_once(&self, req: &ChatRequest) -> Result<RawResponse, ProviderError> {
        let _permit = self.limiter.acquire().await.expect("semaphore never closed");
        let deadline = Duration::from_millis(self.spec.timeout_ms);
        match tokio::time::timeout(deadline, self.transport.send(&self.spec, req)).await {
            Ok(result) => result,
            Err(_) => Err(ProviderError::new(
                ErrorClass::Timeout,
                format!("no response within {} ms", self.spec.timeout_ms),
            )),
        }
    }
}

/// What happened on one attempt; handed to the observer of [`complete_with`].
#[derive(Debug, Clone)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// Backoff slept before this attempt.
    pub delay_before_ms: u64,
    pub response: Option<RawResponse>,
    pub error: Option<ProviderError>,
}

/// Sends `req` with retries. `accept` validates a usable response (e.g.
/// parses the JSON payload); its errors are retried like transport ones.
/// `observe` sees every attempt, successful or not.
pub async fn complete_with<T>(
    client: &Client,
    req: &ChatRequest,
    policy: &RetryPolicy,
    mut accept: impl FnMut(&RawResponse) -> Result<T, ProviderError>,
    mut observe: impl FnMut(&AttemptRecord),
) -> Result<(T, RawResponse), ProviderError> {
    let max_attempts = policy.max_attempts.max(1);
    let mut delay_before_ms = 0u64;
    let mut attempt = 1u32;
    loop {
        let outcome = client.send_once(req).await;
        let (response, result) = match outcome {
            Ok(resp) => {
                let verdict = match classify_failure(&resp) {
                    Some(err) => Err(err),
                    None => accept(&resp),
                };
                (Some(resp), verdict)
            }
            Err(err) => (None, Err(err)),
        };
        observe(&AttemptRecord {
            attempt,
            delay_before_ms,
            response: response.clone(),
            error: result.as_ref().err().cloned(),
        });
        match result {
            Ok(value) => return Ok((value, response.expect("accepted responses exist"))),
            Err(err) if !err.retryable || attempt >= max_attempts => return Err(err),
            Err(_) => {
                let unit = rand::rng().random_range(-1.0..=1.0);
                delay_before_ms = policy.delay_ms(attempt, unit);
                tokio::time::sleep(Duration::from_millis(delay_before_ms)).await;
                attempt += 1;
            }
        }
    }
}

/// [`complete_with`] accepting any unclassified response.
pub async fn complete(
    client: &Client,
    req: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<RawResponse, ProviderError> {
    complete_with(client, req, policy, |_| Ok(()), |_| {})
        .await
        .map(|(_, resp)| resp)
}

/// Replaces every occurrence of `secret` in `text`.
pub fn scrub(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "[redacted]"),
        _ => text.to_string(),
    }
}

// ---------------------------------------------------------------------------
// HTTP dialects

pub struct HttpTransport {
    kind: ProviderKind,
    secret: Option<String>,
    http: reqwest::Client,
}

impl HttpTransport {
    pub fn new(kind: ProviderKind, secret: Option<String>) -> Self {
        HttpTransport {
            kind,
            secret,
            http: reqwest::Client::new(),
        }
    }
}

/// Endpoint URL for a dialect.
pub fn endpoint_url(spec: &ModelSpec) -> String {
    let base = spec.base_url.trim_end_matches('/');
    match spec.provider_kind {
        ProviderKind::NativeJsonProvider => {
            format!("{base}/models/{}:generateContent", spec.model_id)
        }
        _ => format!("{base}/chat/completions"),
    }
}

/// Request body for an OpenAI-compatible `chat/completions` call.
pub fn openai_request_body(spec: &ModelSpec, req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": spec.model_id,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": req.user},
        ],
        "temperature": spec.temperature,
        "max_tokens": spec.max_output_tokens,
    });
    if req.json_mode && spec.json_mode {
        body["response_format"] = json!({"type": "json_object"});
    }
    body
}

/// Request body for the native `generateContent` dialect.
pub fn native_request_body(spec: &ModelSpec, req: &ChatRequest) -> Value {
    let mut generation = json!({
        "temperature": spec.temperature,
        "maxOutputTokens": spec.max_output_tokens,
    });
    if req.json_mode && spec.json_mode {
        generation["responseMimeType"] = json!("application/json");
    }
    json!({
        "systemInstruction": {"parts": [{"text": req.system}]},
        "contents": [{"role": "user", "parts": [{"text": req.user}]}],
        "generationConfig": generation,
    })
}

fn as_u64(v: &Value) -> Option<u64> {
    v.as_u64()
}

/// Extracts content, finish reason and usage from a 2xx OpenAI-style body.
pub fn parse_openai_response(status: u16, body: &str) -> Result<RawResponse, ProviderError> {
    let v: Value = serde_json::from_str(body).map_err(|e| {
        ProviderError::new(ErrorClass::MalformedResponse, format!("response is not JSON: {e}"))
    })?;
    let choice = &v["choices"][0];
    let content = choice["message"]["content"].as_str().unwrap_or_default();
    let finish_reason = match choice["finish_reason"].as_str() {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Other,
    };
    Ok(RawResponse {
        body_text: content.to_string(),
        finish_reason,
        http_status: status,
        prompt_tokens: as_u64(&v["usage"]["prompt_tokens"]),
        output_tokens: as_u64(&v["usage"]["completion_tokens"]),
    })
}

/// Extracts content, finish reason and usage from a 2xx native body.
pub fn parse_native_response(status: u16, body: &str) -> Result<RawResponse, ProviderError> {
    let v: Value = serde_json::from_str(body).map_err(|e| {
        ProviderError::new(ErrorClass::MalformedResponse, format!("response is not JSON: {e}"))
    })?;
    let candidate = &v["candidates"][0];
    let content: String = candidate["content"]["parts"]
        .as_array()
        .map(|parts| parts.iter().filter_map(|p| p["text"].as_str()).collect())
        .unwrap_or_default();
    let finish_reason = match candidate["finishReason"].as_str() {
        Some("STOP") => FinishReason::Stop,
        Some("MAX_TOKENS") => FinishReason::Length,
        _ => FinishReason::Other,
    };
    Ok(RawResponse {
        body_text: content,
        finish_reason,
        http_status: status,
        prompt_tokens: as_u64(&v["usageMetadata"]["promptTokenCount"]),
        output_tokens: as_u64(&v["usageMetadata"]["candidatesTokenCount"]),
    })
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, spec: &ModelSpec, req: &ChatRequest) -> Result<RawResponse, ProviderError> {
        let url = endpoint_url(spec);
        let mut builder = self.http.post(&url);
        let body = match self.kind {
            ProviderKind::NativeJsonProvider => {
                if let Some(key) = &self.secret {
                    builder = builder.header("x-goog-api-key", key);
                }
                native_request_body(spec, req)
            }
            _ => {
                if let Some(key) = &self.secret {
                    builder = builder.bearer_auth(key);
                }
                openai_request_body(spec, req)
            }
        };
        let secret = self.secret.as_deref();
        let response = builder.json(&body).send().await.map_err(|e| {
            let class = if e.is_timeout() {
                ErrorClass::Timeout
            } else {
                ErrorClass::NetworkError
            };
            ProviderError::new(class, scrub(&e.without_url().to_string(), secret))
        })?;
        let status = response.status().as_u16();
        let text = response.text().await.map_err(|e| {
            ProviderError::new(ErrorClass::NetworkError, scrub(&e.to_string(), secret))
        })?;
        if !(200..300).contains(&status) {
            return Ok(RawResponse {
                body_text: scrub(&text, secret),
                finish_reason: FinishReason::Other,
                http_status: status,
                prompt_tokens: None,
                output_tokens: None,
            });
        }
        match self.kind {
            ProviderKind::NativeJsonProvider => parse_native_response(status, &text),
            _ => parse_openai_response(status, &text),
        }
    }
}

// ---------------------------------------------------------------------------
// Mock

/// Fixture selected when the user message contains `needle`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainsFixture {
    pub needle: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Respond with this HTTP status instead of the fixture.
    Status { code: u16 },
    /// Cut the body after this many chars and report `Length`.
    Truncate { after_chars: usize },
    /// Sleep before responding.
    Delay { ms: u64 },
    /// Fail as a dropped connection.
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    /// Applies only when the user message contains this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_user_contains: Option<String>,
    pub fault: Fault,
    /// How many matching calls the rule fires for; `None` means always.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

/// Lookup order: exact `fixtures`, then the first matching `contains`
/// entry, then `defaults` in call order (the last one repeats).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub fixtures: BTreeMap<String, String>,
    #[serde(default)]
    pub contains: Vec<ContainsFixture>,
    #[serde(default)]
    pub defaults: Vec<String>,
    #[serde(default)]
    pub faults: Vec<FaultRule>,
}

type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

#[derive(Default)]
struct MockState {
    calls: Vec<String>,
    fault_hits: Vec<u32>,
    next_default: usize,
}

/// Deterministic offline provider for tests and dry runs.
pub struct MockProvider {
    script: MockScript,
    responder: Option<Box<Responder>>,
    state: Mutex<MockState>,
}

impl std::fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockProvider").field("script", &self.script).finish()
    }
}

/// Builds a mock from exact fixtures and a fault script.
pub fn mock_provider(fixtures: BTreeMap<String, String>, faults: Vec<FaultRule>) -> MockProvider {
    MockProvider::new(MockScript {
        fixtures,
        faults,
        ..MockScript::default()
    })
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        let rules = script.faults.len();
        MockProvider {
            script,
            responder: None,
            state: Mutex::new(MockState {
                fault_hits: vec![0; rules],
                ..MockState::default()
            }),
        }
    }

    /// Computes bodies from the request; consulted after exact fixtures.
    pub fn with_responder(
        mut self,
        responder: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn calls(&self) -> usize {
        self.state.lock().expect("mock state").calls.len()
    }

    pub fn calls_containing(&self, needle: &str) -> usize {
        self.state
            .lock()
            .expect("mock state")
            .calls
            .iter()
            .filter(|u| u.contains(needle))
            .count()
    }

    fn lookup(&self, req: &ChatRequest, state: &mut MockState) -> Option<String> {
        if let Some(body) = self.script.fixtures.get(&req.user) {
            return Some(body.clone());
        }
        if let Some(body) = self.responder.as_ref().and_then(|r| r(req)) {
            return Some(body);
        }
        if let Some(fx) = self
            .script
            .contains
            .iter()
            .find(|fx| req.user.contains(&fx.needle))
        {
            return Some(fx.body.clone());
        }
        if self.script.defaults.is_empty() {
            return None;
        }
        let idx = state.next_default.min(self.script.defaults.len() - 1);
        state.next_default += 1;
        Some(self.script.defaults[idx].clone())
    }

    fn pick_fault(&self, req: &ChatRequest, state: &mut MockState) -> Option<Fault> {
        for (i, rule) in self.script.faults.iter().enumerate() {
            let applies = rule
                .when_user_contains
                .as_ref()
                .is_none_or(|needle| req.user.contains(needle));
            let remaining = rule.times.is_none_or(|t| state.fault_hits[i] < t);
            if applies && remaining {
                state.fault_hits[i] += 1;
                return Some(rule.fault.clone());
            }
        }
        None
    }
}

#[async_trait]
impl Transport for MockProvider {
    async fn send(&self, _spec: &ModelSpec, req: &ChatRequest) -> Result<RawResponse, ProviderError> {
        let (fault, body) = {
            let mut state = self.state.lock().expect("mock state");
            state.calls.push(req.user.clone());
            let fault = self.pick_fault(req, &mut state);
            let body = self.lookup(req, &mut state);
            (fault, body)
        };
        let ok = |body: String, finish_reason| RawResponse {
            body_text: body,
            finish_reason,
            http_status: 200,
            prompt_tokens: None,
            output_tokens: None,
        };
        let missing = || {
            ProviderError::fatal(
                ErrorClass::MalformedResponse,
                format!(
                    "MissingFixture: no mock response for user message of {} chars",
                    req.user.chars().count()
                ),
            )
        };
        match fault {
            Some(Fault::Status { code }) => Ok(RawResponse {
                body_text: format!("{{\"error\":{{\"code\":{code},\"message\":\"mock fault\"}}}}"),
                finish_reason: FinishReason::Other,
                http_status: code,
                prompt_tokens: None,
                output_tokens: None,
            }),
            Some(Fault::Disconnect) => Err(ProviderError::new(
                ErrorClass::NetworkError,
                "mock connection reset",
            )),
            Some(Fault::Truncate { after_chars }) => {
                let body = body.ok_or_else(missing)?;
                let cut: String = body.chars().take(after_chars).collect();
                Ok(ok(cut, FinishReason::Length))
            }
            Some(Fault::Delay { ms }) => {
                tokio::time::sleep(Duration::from_millis(ms)).await;
                body.map(|b| ok(b, FinishReason::Stop)).ok_or_else(missing)
            }
            None => body.map(|b| ok(b, FinishReason::Stop)).ok_or_else(missing),
        }
    }
}
