use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Speaker, Usage};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "CREWFORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL without the `/chat/completions` suffix.
    pub base_url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8080/v1".into(),
            model: "default".into(),
            timeout_ms: 60_000,
            max_retries: 2,
            backoff_ms: 500,
        }
    }
}

/// Chat-completions client. Retries timeouts, transport errors and 5xx
/// responses; never retries a 4xx.
#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    last_attempts: u32,
}

impl HttpBackend {
    /// Reads the token from [`API_KEY_ENV`] when present.
    pub fn new(config: HttpConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(config, key)
    }

    pub fn with_key(config: HttpConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, api_key, agent, last_attempts: 0 }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": req.system})];
        messages.extend(req.turns.iter().map(|t| {
            let role = match t.speaker {
                Speaker::Framework => "user",
                Speaker::Model => "assistant",
            };
            json!({"role": role, "content": t.content})
        }));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    fn attempt(&self, body: &str) -> Result<String, BackendError> {
        let mut request = self.agent.post(self.endpoint()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send(body).map_err(map_transport)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::HttpStatus(status));
        }
        response.body_mut().read_to_string().map_err(map_transport)
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::HttpTimeout,
        ureq::Error::StatusCode(code) => BackendError::HttpStatus(code),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::HttpTimeout,
        other => BackendError::Transport(other.to_string()),
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::HttpTimeout | BackendError::Transport(_) => true,
        BackendError::HttpStatus(code) => *code >= 500,
        _ => false,
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn decode(text: &str) -> Result<(String, Usage), BackendError> {
    let wire: WireResponse = serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let choice = wire.choices.into_iter().next().ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
    let content =
        choice.message.content.ok_or_else(|| BackendError::MalformedResponse("choice has null content".into()))?;
    let usage = wire
        .usage
        .map(|u| Usage { prompt_units: u.prompt_tokens, completion_units: u.completion_tokens })
        .unwrap_or_default();
    Ok((content, usage))
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = self.body(req).to_string();
        let start = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.attempt(&body) {
                Err(e) if retryable(&e) && attempts <= self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                other => break other,
            }
        };
        self.last_attempts = attempts;
        let (content, usage) = decode(&result?)?;
        Ok(ChatResponse { content, usage, latency_ms: start.elapsed().as_millis() as u64 })
    }

    fn label(&self) -> &'static str {
        "http"
    }

    fn last_attempts(&self) -> u32 {
        self.last_attempts
    }
}
