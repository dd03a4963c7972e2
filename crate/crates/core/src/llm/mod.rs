//! Completion backends, retrying gateway and token usage accounting.

mod http;
mod ledger;
mod structured;

use std::fmt::Debug;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::TokenCounter;

pub use http::{post_json, HttpBackend, HttpConfig};
pub use ledger::{report_from, CallRecord, TagUsage, UsageLedger, UsageReport};
pub use structured::{strip_code_fences, Field, FieldKind, Schema, Structured, CORRECTIVE_MESSAGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Sampling parameters. Defaults follow the base model's recommended
/// decoding setup: temperature 1.0, top-p 0.95, top-k 64.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_output_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 1.0,
            top_p: 0.95,
            top_k: Some(64),
            max_output_tokens: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(messages: Vec<Message>, params: &DecodingParams, seed: Option<u64>) -> Self {
        CompletionRequest {
            messages,
            temperature: params.temperature,
            top_p: params.top_p,
            top_k: params.top_k,
            max_output_tokens: params.max_output_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let bad = |what: &str| Err(GatewayError::InvalidRequest(what.to_string()));
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return bad("system message must come first");
        }
        Ok(())
    }

    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// What a backend returns. Token counts are optional; the gateway fills
/// missing ones with its local counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub prompt_tokens: Option<usize>,
    pub output_tokens: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub backend_id: String,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("unexpected response: {0}")]
    Decode(String),
    /// The backend refuses this request; retrying cannot help.
    #[error("request rejected: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, BackendError::Rejected(_))
    }
}

pub trait Backend: Send + Sync + Debug {
    fn id(&self) -> String;
    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("completion request has no messages")]
    EmptyPrompt,
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: BackendError },
    #[error("backend rejected request: {0}")]
    Rejected(BackendError),
    #[error("agent output unparseable after {} attempts: {last_error}", .attempts.len())]
    UnparseableAgentOutput {
        attempts: Vec<String>,
        last_error: String,
    },
}

impl GatewayError {
    /// True for failures of the backend itself (as opposed to bad requests
    /// or bad model output).
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            GatewayError::BackendUnavailable { .. } | GatewayError::Rejected(_)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Maximum number of sends per completion, retries included.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

/// Default attempt cap for structured (JSON) agent calls.
pub const DEFAULT_STRUCTURED_ATTEMPTS: u32 = 3;

/// A backend plus the policies and ledger every call goes through. Cheap to
/// clone; clones share the backend and ledger.
#[derive(Clone, Debug)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    counter: Arc<dyn TokenCounter>,
    retry: RetryPolicy,
    ledger: Arc<UsageLedger>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, counter: Arc<dyn TokenCounter>) -> Self {
        Gateway {
            backend,
            counter,
            retry: RetryPolicy::default(),
            ledger: Arc::new(UsageLedger::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Same backend, calls recorded into `ledger`.
    pub fn with_ledger(&self, ledger: Arc<UsageLedger>) -> Self {
        Gateway {
            ledger,
            ..self.clone()
        }
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    /// Sends one request, retrying transient failures with exponential
    /// backoff, and records its usage under `tag`.
    pub fn complete(
        &self,
        tag: &str,
        request: &CompletionRequest,
    ) -> Result<Completion, GatewayError> {
        request.validate()?;
        let cap = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        let raw = loop {
            attempt += 1;
            match self.backend.send(request) {
                Ok(raw) => break raw,
                Err(err) if !err.is_retryable() => return Err(GatewayError::Rejected(err)),
                Err(err) if attempt >= cap => {
                    return Err(GatewayError::BackendUnavailable {
                        attempts: attempt,
                        last: err,
                    })
                }
                Err(_) => std::thread::sleep(self.retry.delay(attempt)),
            }
        };
        let prompt_tokens = raw.prompt_tokens.unwrap_or_else(|| {
            request
                .messages
                .iter()
                .map(|m| self.counter.count(&m.content))
                .sum()
        });
        let output_tokens = raw
            .output_tokens
            .unwrap_or_else(|| self.counter.count(&raw.text));
        self.ledger.record(tag, prompt_tokens, output_tokens);
        Ok(Completion {
            text: raw.text,
            prompt_tokens,
            output_tokens,
            backend_id: self.backend.id(),
        })
    }
}
