use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::tester::UserFeedback;

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    /// Substring that must occur in the last framework turn.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default)]
    pub response: String,
    /// When set the call fails with [`BackendError::Injected`] instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScriptEntry {
    pub fn reply(response: impl Into<String>) -> Self {
        ScriptEntry { pattern: None, response: response.into(), error: None }
    }
}

/// Deterministic replay of a fixed list of replies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedBackend {
    script: Vec<ScriptEntry>,
    cursor: usize,
}

impl ScriptedBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        ScriptedBackend { script, cursor: 0 }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - self.cursor
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let entry = self.script.get(self.cursor).ok_or(BackendError::ScriptExhausted(self.script.len()))?;
        if let Some(p) = &entry.pattern {
            if !req.last_framework_turn().contains(p.as_str()) {
                return Err(BackendError::ScriptMismatch(p.clone()));
            }
        }
        self.cursor += 1;
        if let Some(e) = &entry.error {
            return Err(BackendError::Injected(e.clone()));
        }
        let completion_units = entry.response.split_whitespace().count() as u64;
        let prompt_units = req.turns.iter().map(|t| t.content.split_whitespace().count() as u64).sum::<u64>()
            + req.system.split_whitespace().count() as u64;
        Ok(ChatResponse {
            content: entry.response.clone(),
            usage: Usage { prompt_units, completion_units },
            latency_ms: 0,
        })
    }

    fn label(&self) -> &'static str {
        "scripted"
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Format(#[from] toml::de::Error),
}

/// A script file: replies per role plus operator feedback for review points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub analyst: Vec<ScriptEntry>,
    #[serde(default)]
    pub programmer: Vec<ScriptEntry>,
    #[serde(default)]
    pub tester: Vec<ScriptEntry>,
    #[serde(default)]
    pub feedback: Vec<UserFeedback>,
}

impl ScriptFile {
    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }
}
