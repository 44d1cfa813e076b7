//! Text-completion port with token accounting.
//!
//! Every component that talks to a model (planner, simulator, critic) goes
//! through [`CompletionPort`]. [`Gateway`] is the standard implementation: it
//! wraps an [`LlmBackend`] and appends one [`AuditEntry`] per call. Two
//! backends ship with the crate: [`ScriptedBackend`] for deterministic runs and
//! [`HttpBackend`] for a single-endpoint completion service.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 8192;

pub const ENV_LLM_URL: &str = "DAGSTOP_LLM_URL";
pub const ENV_LLM_TOKEN: &str = "DAGSTOP_LLM_TOKEN";
pub const ENV_LLM_BACKEND_ID: &str = "DAGSTOP_LLM_BACKEND_ID";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("scripted backend exhausted after {served} responses")]
    ScriptExhausted { served: usize },
    #[error("no scripted response for key '{0}'")]
    MissingKey(String),
    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("request timed out after {retries} retries")]
    Timeout { retries: u32 },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl LlmError {
    /// Retry attempts consumed before the failure surfaced.
    pub fn retries(&self) -> u32 {
        match self {
            LlmError::Transport { retries, .. } | LlmError::Timeout { retries } => *retries,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub params: CompletionParams,
    /// Routing key for keyed scripted backends ("planner", "simulator", ...).
    pub key: Option<&'a str>,
}

impl<'a> CompletionRequest<'a> {
    pub fn new(prompt: &'a str) -> Self {
        Self {
            prompt,
            params: CompletionParams::default(),
            key: None,
        }
    }

    pub fn keyed(mut self, key: &'a str) -> Self {
        self.key = Some(key);
        self
    }

    pub fn with_params(mut self, params: CompletionParams) -> Self {
        self.params = params;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub completion: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub retries: u32,
}

pub trait LlmBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn call(&self, request: &CompletionRequest<'_>) -> Result<BackendReply, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRecord {
    pub prompt: String,
    pub completion: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency: Duration,
    pub backend_id: String,
}

pub trait CompletionPort: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionRecord, LlmError>;
}

/// Whitespace-separated unit count, the token proxy used by the scripted
/// backend in both directions.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub timestamp_ms: u128,
    pub backend_id: String,
    pub key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub retries: u32,
    pub latency_ms: f64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only call log. Entries are kept in memory and optionally mirrored to
/// a JSON-lines file.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
    sink: Option<Mutex<File>>,
}

impl AuditLog {
    pub fn with_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::default(),
            sink: Some(Mutex::new(file)),
        })
    }

    fn append(&self, mut entry: AuditEntry) {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        entry.seq = entries.len() as u64;
        if let Some(sink) = &self.sink {
            let mut file = sink.lock().unwrap_or_else(|e| e.into_inner());
            if let Ok(line) = serde_json::to_string(&entry) {
                // A failing audit sink must not fail the completion itself.
                let _ = writeln!(file, "{line}");
            }
        }
        entries.push(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Gateway {
    backend: Box<dyn LlmBackend>,
    audit: AuditLog,
}

impl Gateway {
    pub fn new(backend: impl LlmBackend + 'static) -> Self {
        Self {
            backend: Box::new(backend),
            audit: AuditLog::default(),
        }
    }

    pub fn with_audit(backend: impl LlmBackend + 'static, audit: AuditLog) -> Self {
        Self {
            backend: Box::new(backend),
            audit,
        }
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }
}

impl CompletionPort for Gateway {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionRecord, LlmError> {
        let started = Instant::now();
        let result = self.backend.call(request);
        let latency = started.elapsed();
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or_default();
        let mut entry = AuditEntry {
            seq: 0,
            timestamp_ms,
            backend_id: self.backend.backend_id().to_string(),
            key: request.key.map(str::to_string),
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            tokens_in: 0,
            tokens_out: 0,
            retries: 0,
            latency_ms: latency.as_secs_f64() * 1e3,
            ok: true,
            error: None,
        };
        match result {
            Ok(reply) => {
                entry.tokens_in = reply.tokens_in;
                entry.tokens_out = reply.tokens_out;
                entry.retries = reply.retries;
                self.audit.append(entry);
                Ok(CompletionRecord {
                    prompt: request.prompt.to_string(),
                    completion: reply.completion,
                    tokens_in: reply.tokens_in,
                    tokens_out: reply.tokens_out,
                    latency,
                    backend_id: self.backend.backend_id().to_string(),
                })
            }
            Err(err) => {
                entry.ok = false;
                entry.retries = err.retries();
                entry.error = Some(err.to_string());
                self.audit.append(entry);
                Err(err)
            }
        }
    }
}

/// One scripted completion. Token counts default to the whitespace proxy when
/// not pinned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ScriptEntryRepr")]
pub struct ScriptedResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_out: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptEntryRepr {
    Text(String),
    Detailed {
        text: String,
        #[serde(default)]
        tokens_in: Option<u64>,
        #[serde(default)]
        tokens_out: Option<u64>,
    },
}

impl From<ScriptEntryRepr> for ScriptedResponse {
    fn from(value: ScriptEntryRepr) -> Self {
        match value {
            ScriptEntryRepr::Text(text) => ScriptedResponse::text(text),
            ScriptEntryRepr::Detailed {
                text,
                tokens_in,
                tokens_out,
            } => ScriptedResponse {
                text,
                tokens_in,
                tokens_out,
            },
        }
    }
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens_in: None,
            tokens_out: None,
        }
    }

    pub fn with_tokens(text: impl Into<String>, tokens_in: u64, tokens_out: u64) -> Self {
        Self {
            text: text.into(),
            tokens_in: Some(tokens_in),
            tokens_out: Some(tokens_out),
        }
    }
}

impl From<&str> for ScriptedResponse {
    fn from(value: &str) -> Self {
        ScriptedResponse::text(value)
    }
}

impl From<String> for ScriptedResponse {
    fn from(value: String) -> Self {
        ScriptedResponse::text(value)
    }
}

enum Script {
    Queue {
        pending: VecDeque<ScriptedResponse>,
        served: usize,
    },
    Keyed(BTreeMap<String, ScriptedResponse>),
}

/// Deterministic test double.
///
/// Queue mode hands out responses in order and fails once drained. Keyed mode
/// answers every call carrying a known key with that key's response.
pub struct ScriptedBackend {
    id: String,
    script: Mutex<Script>,
}

impl ScriptedBackend {
    pub fn queue<I, R>(responses: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<ScriptedResponse>,
    {
        Self {
            id: "scripted".to_string(),
            script: Mutex::new(Script::Queue {
                pending: responses.into_iter().map(Into::into).collect(),
                served: 0,
            }),
        }
    }

    pub fn keyed<I, K, R>(responses: I) -> Self
    where
        I: IntoIterator<Item = (K, R)>,
        K: Into<String>,
        R: Into<ScriptedResponse>,
    {
        Self {
            id: "scripted".to_string(),
            script: Mutex::new(Script::Keyed(
                responses
                    .into_iter()
                    .map(|(k, r)| (k.into(), r.into()))
                    .collect(),
            )),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Number of queued responses not yet served (0 in keyed mode).
    pub fn remaining(&self) -> usize {
        match &*self.script.lock().unwrap_or_else(|e| e.into_inner()) {
            Script::Queue { pending, .. } => pending.len(),
            Script::Keyed(_) => 0,
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &CompletionRequest<'_>) -> Result<BackendReply, LlmError> {
        let mut script = self.script.lock().unwrap_or_else(|e| e.into_inner());
        let response = match &mut *script {
            Script::Queue { pending, served } => {
                let next = pending
                    .pop_front()
                    .ok_or(LlmError::ScriptExhausted { served: *served })?;
                *served += 1;
                next
            }
            Script::Keyed(map) => {
                let key = request.key.unwrap_or_default();
                map.get(key)
                    .cloned()
                    .ok_or_else(|| LlmError::MissingKey(key.to_string()))?
            }
        };
        Ok(BackendReply {
            tokens_in: response
                .tokens_in
                .unwrap_or_else(|| whitespace_tokens(request.prompt)),
            tokens_out: response
                .tokens_out
                .unwrap_or_else(|| whitespace_tokens(&response.text)),
            completion: response.text,
            retries: 0,
        })
    }
}

/// Single-endpoint HTTP completion backend.
///
/// Request body: `{"prompt", "temperature", "max_tokens"}`. Response body:
/// `{"completion", "usage": {"prompt_tokens", "completion_tokens"}}`.
/// Transport failures, timeouts, 429 and 5xx responses are retried.
pub struct HttpBackend {
    id: String,
    url: String,
    token: Option<String>,
    max_retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct HttpResponseBody {
    #[serde(alias = "text")]
    completion: String,
    #[serde(default)]
    usage: HttpUsage,
}

#[derive(Deserialize, Default)]
struct HttpUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, Duration::from_secs(120))
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: "http".to_string(),
            url: url.into(),
            token: None,
            max_retries: 2,
            backoff: Duration::from_millis(200),
            agent,
        }
    }

    /// Reads `DAGSTOP_LLM_URL` (required), `DAGSTOP_LLM_TOKEN` and
    /// `DAGSTOP_LLM_BACKEND_ID`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(ENV_LLM_URL)
            .ok()
            .filter(|u| !u.trim().is_empty())
            .ok_or_else(|| LlmError::Config(format!("{ENV_LLM_URL} is not set")))?;
        let mut backend = Self::new(url);
        backend.token = std::env::var(ENV_LLM_TOKEN).ok().filter(|t| !t.is_empty());
        if let Ok(id) = std::env::var(ENV_LLM_BACKEND_ID) {
            backend.id = id;
        }
        Ok(backend)
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, body: &HttpRequestBody<'_>) -> Result<HttpResponseBody, (LlmError, bool)> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(resp) => resp,
            Err(ureq::Error::Timeout(_)) => return Err((LlmError::Timeout { retries: 0 }, true)),
            Err(e) => {
                return Err((
                    LlmError::Transport {
                        message: e.to_string(),
                        retries: 0,
                    },
                    true,
                ))
            }
        };
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            let retryable = status == 429 || status >= 500;
            return Err((LlmError::Status { status, body }, retryable));
        }
        resp.body_mut()
            .read_json::<HttpResponseBody>()
            .map_err(|e| (LlmError::BadResponse(e.to_string()), false))
    }
}

impl LlmBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &CompletionRequest<'_>) -> Result<BackendReply, LlmError> {
        let body = HttpRequestBody {
            prompt: request.prompt,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
        };
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Ok(parsed) => {
                    return Ok(BackendReply {
                        tokens_in: parsed
                            .usage
                            .prompt_tokens
                            .unwrap_or_else(|| whitespace_tokens(request.prompt)),
                        tokens_out: parsed
                            .usage
                            .completion_tokens
                            .unwrap_or_else(|| whitespace_tokens(&parsed.completion)),
                        completion: parsed.completion,
                        retries,
                    })
                }
                Err((_, true)) if retries < self.max_retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(retries));
                    retries += 1;
                }
                Err((err, _)) => {
                    return Err(match err {
                        LlmError::Transport { message, .. } => {
                            LlmError::Transport { message, retries }
                        }
                        LlmError::Timeout { .. } => LlmError::Timeout { retries },
                        other => other,
                    })
                }
            }
        }
    }
}
