//! On-disk session layout:
//!
//! ```text
//! <root>/<session_id>/session.json       spec, config, seed and script
//! <root>/<session_id>/transcript.ndjson  one message per line, append-only
//! <root>/<session_id>/calls.ndjson       one backend call per line
//! <root>/<session_id>/reports/           test reports and the accepted policy
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{run_to_completion, start_session, Deps, Phase, SessionConfig, SessionError, SessionState, StepError};
use crate::backend::{CallRecord, ScriptEntry, ScriptFile};
use crate::roles::{Message, Payload, Role, TaskSpec};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Format { path: String, line: usize, detail: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Config(#[from] super::ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Everything needed to re-run a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub spec: TaskSpec,
    pub config: SessionConfig,
    pub seed: u64,
    /// Script used for scripted roles, if any.
    #[serde(default)]
    pub script: Option<ScriptFile>,
}

impl SessionRecord {
    pub fn of(state: &SessionState, script: Option<ScriptFile>) -> Self {
        SessionRecord {
            session_id: state.session_id.clone(),
            spec: state.spec.clone(),
            config: state.config.clone(),
            seed: state.rng_seed,
            script,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SessionStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, session_id: &str) -> PathBuf {
        self.root.join(session_id)
    }

    pub fn create(&self, record: &SessionRecord) -> Result<SessionWriter, StoreError> {
        let dir = self.dir(&record.session_id);
        let reports = dir.join("reports");
        fs::create_dir_all(&reports).map_err(io_err(&reports))?;
        let path = dir.join("session.json");
        let json = serde_json::to_string_pretty(record).expect("record serializes");
        fs::write(&path, json).map_err(io_err(&path))?;
        Ok(SessionWriter { dir, messages_written: 0, calls_written: 0 })
    }

    pub fn load_record(&self, session_id: &str) -> Result<SessionRecord, StoreError> {
        let path = self.dir(session_id).join("session.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Format {
            path: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })
    }

    pub fn load_transcript(&self, session_id: &str) -> Result<Vec<Message>, StoreError> {
        read_ndjson(&self.dir(session_id).join("transcript.ndjson"))
    }

    pub fn load_calls(&self, session_id: &str) -> Result<Vec<CallRecord>, StoreError> {
        read_ndjson(&self.dir(session_id).join("calls.ndjson"))
    }

    /// Ids of stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(&self.root)
            .map_err(io_err(&self.root))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("session.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Re-drives a stored session from its recorded replies and feedback and
    /// compares the resulting transcript with the stored one.
    pub fn replay(&self, session_id: &str) -> Result<ReplayOutcome, StoreError> {
        let record = self.load_record(session_id)?;
        let stored = self.load_transcript(session_id)?;
        let calls = self.load_calls(session_id)?;
        let script = script_from_session(&calls, &stored);
        let mut deps = Deps::scripted(&record.config, &record.spec, &script)?;
        let mut state = start_session(record.spec, record.config, record.seed)?;
        match run_to_completion(&mut state, &mut deps) {
            Ok(_) | Err(StepError::AwaitingFeedback) => {}
            Err(e) => unreachable!("replay stepping only fails for lack of feedback: {e}"),
        }
        let a = normalize_transcript(&stored);
        let b = normalize_transcript(&state.transcript);
        let first_difference = a.lines().zip(b.lines()).position(|(x, y)| x != y).or_else(|| {
            let (na, nb) = (a.lines().count(), b.lines().count());
            (na != nb).then_some(na.min(nb))
        });
        Ok(ReplayOutcome {
            identical: first_difference.is_none(),
            first_difference,
            stored_len: stored.len(),
            replayed_len: state.transcript.len(),
            phase: state.phase,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub identical: bool,
    /// Index of the first differing message.
    pub first_difference: Option<usize>,
    pub stored_len: usize,
    pub replayed_len: usize,
    pub phase: Phase,
}

fn read_ndjson<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Format {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Appends new transcript lines, call records and reports as a session
/// advances. Never rewrites what it already wrote.
#[derive(Debug)]
pub struct SessionWriter {
    dir: PathBuf,
    messages_written: usize,
    calls_written: usize,
}

impl SessionWriter {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn sync(&mut self, transcript: &[Message], calls: &[CallRecord]) -> Result<(), StoreError> {
        let new = &transcript[self.messages_written.min(transcript.len())..];
        append_lines(&self.dir.join("transcript.ndjson"), new)?;
        for m in new {
            match &m.payload {
                Payload::TestReport(p) => {
                    let path = self.dir.join("reports").join(format!("{:04}-test-report.json", m.seq));
                    let json = serde_json::to_string_pretty(&p.report).expect("report serializes");
                    fs::write(&path, json).map_err(io_err(&path))?;
                }
                Payload::Acceptance(p) => {
                    let path = self.dir.join("reports").join("accepted.policy");
                    fs::write(&path, &p.accepted_policy).map_err(io_err(&path))?;
                }
                _ => {}
            }
        }
        self.messages_written = transcript.len();
        append_lines(&self.dir.join("calls.ndjson"), &calls[self.calls_written.min(calls.len())..])?;
        self.calls_written = calls.len();
        Ok(())
    }
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    if items.is_empty() && path.exists() {
        return Ok(());
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item).expect("record serializes"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(io_err(path))
}

/// The transcript as NDJSON, one message per line.
pub fn transcript_to_ndjson(transcript: &[Message]) -> String {
    transcript.iter().map(|m| serde_json::to_string(m).expect("message serializes") + "\n").collect()
}

/// NDJSON with `session_id` and `timestamp` removed, for determinism checks.
pub fn normalize_transcript(transcript: &[Message]) -> String {
    let mut out = String::new();
    for m in transcript {
        let mut v = serde_json::to_value(m).expect("message serializes");
        let obj = v.as_object_mut().expect("messages serialize as objects");
        obj.remove("session_id");
        obj.remove("timestamp");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// Rebuilds a script from recorded backend calls and operator feedback.
pub fn script_from_session(calls: &[CallRecord], transcript: &[Message]) -> ScriptFile {
    let mut script = ScriptFile::default();
    for c in calls {
        let entry = match (&c.response, &c.error) {
            (Some(r), _) => ScriptEntry::reply(r.content.clone()),
            (None, Some(e)) => ScriptEntry { error: Some(e.to_string()), ..Default::default() },
            (None, None) => ScriptEntry::default(),
        };
        match c.role {
            Role::Analyst => script.analyst.push(entry),
            Role::Programmer => script.programmer.push(entry),
            Role::Tester => script.tester.push(entry),
        }
    }
    script.feedback = transcript
        .iter()
        .filter_map(|m| match &m.payload {
            Payload::UserFeedback(p) => Some(p.feedback.clone()),
            _ => None,
        })
        .collect();
    script
}
