//! LLM invocation: a scripted replay backend for tests and a chat-completions
//! HTTP backend for live sessions. Every call goes through [`Backends`], which
//! keeps the raw call log.

mod http;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roles::Role;

pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use scripted::{ScriptEntry, ScriptError, ScriptFile, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Framework,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub turns: Vec<Turn>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    /// A single framework turn under `system`.
    pub fn single(system: impl Into<String>, prompt: impl Into<String>, max_tokens: u32, temperature: f64) -> Self {
        ChatRequest {
            system: system.into(),
            turns: vec![Turn { speaker: Speaker::Framework, content: prompt.into() }],
            max_tokens,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.turns.is_empty() {
            return Err(BackendError::InvalidRequest("at least one turn is required".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Framework } else { Speaker::Model };
            if t.speaker != expected {
                return Err(BackendError::InvalidRequest(format!(
                    "turn {i} must come from {expected:?}; turns alternate starting with the framework"
                )));
            }
        }
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be a non-negative number".into()));
        }
        Ok(())
    }

    /// The most recent framework turn, used for script matching.
    pub fn last_framework_turn(&self) -> &str {
        self.turns.iter().rev().find(|t| t.speaker == Speaker::Framework).map(|t| t.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_units: u64,
    pub completion_units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    /// May be empty; callers treat that as a failure.
    pub content: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted after {0} responses")]
    ScriptExhausted(usize),
    #[error("script entry expected a prompt containing {0:?}")]
    ScriptMismatch(String),
    #[error("{0}")]
    Injected(String),
    #[error("request timed out")]
    HttpTimeout,
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("empty response content")]
    EmptyContent,
}

pub trait ChatBackend: Send {
    fn complete(&mut self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Short label recorded in the call log.
    fn label(&self) -> &'static str;

    /// Number of attempts made by the last `complete` call.
    fn last_attempts(&self) -> u32 {
        1
    }
}

impl fmt::Debug for dyn ChatBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChatBackend({})", self.label())
    }
}

/// One line of `calls.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub index: usize,
    pub role: Role,
    pub backend: String,
    pub attempts: u32,
    pub request: ChatRequest,
    pub response: Option<ChatResponse>,
    pub error: Option<BackendError>,
}

/// Per-role backends plus the shared call log.
#[derive(Debug)]
pub struct Backends {
    pub analyst: Box<dyn ChatBackend>,
    pub programmer: Box<dyn ChatBackend>,
    pub tester: Box<dyn ChatBackend>,
    calls: Vec<CallRecord>,
}

impl Backends {
    pub fn new(analyst: Box<dyn ChatBackend>, programmer: Box<dyn ChatBackend>, tester: Box<dyn ChatBackend>) -> Self {
        Backends { analyst, programmer, tester, calls: Vec::new() }
    }

    /// Scripted backends taken from one script file.
    pub fn scripted(script: &ScriptFile) -> Self {
        Backends::new(
            Box::new(ScriptedBackend::new(script.analyst.clone())),
            Box::new(ScriptedBackend::new(script.programmer.clone())),
            Box::new(ScriptedBackend::new(script.tester.clone())),
        )
    }

    fn get(&mut self, role: Role) -> &mut Box<dyn ChatBackend> {
        match role {
            Role::Analyst => &mut self.analyst,
            Role::Programmer => &mut self.programmer,
            Role::Tester => &mut self.tester,
        }
    }

    /// Invokes the role's backend and logs the call, successful or not.
    /// Empty content is reported as [`BackendError::EmptyContent`].
    pub fn complete(&mut self, role: Role, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let index = self.calls.len();
        let backend = self.get(role);
        let result = req.validate().and_then(|()| backend.complete(req)).and_then(|r| {
            if r.content.trim().is_empty() {
                Err(BackendError::EmptyContent)
            } else {
                Ok(r)
            }
        });
        let record = CallRecord {
            index,
            role,
            backend: backend.label().to_string(),
            attempts: backend.last_attempts(),
            request: req.clone(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().cloned(),
        };
        self.calls.push(record);
        result
    }

    pub fn calls(&self) -> &[CallRecord] {
        &self.calls
    }
}
