use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{Role, SubtaskPlan, TaskSpec};
use crate::orchestrator::Phase;
use crate::tester::{EscalationReport, HistoryEntry, TestReport, TuningDirective, UserFeedback};

/// Sender or recipient of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Analyst,
    Programmer,
    Tester,
    User,
}

impl From<Role> for Party {
    fn from(r: Role) -> Self {
        match r {
            Role::Analyst => Party::Analyst,
            Role::Programmer => Party::Programmer,
            Role::Tester => Party::Tester,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Analyst => "analyst",
            Party::Programmer => "programmer",
            Party::Tester => "tester",
            Party::User => "user",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Requirements,
    Plan,
    Subtask,
    PolicyDraft,
    ParseReport,
    TestReport,
    TuningReport,
    UserFeedback,
    Escalation,
    Acceptance,
    Failure,
}

impl MessageKind {
    pub const ALL: [MessageKind; 11] = [
        MessageKind::Requirements,
        MessageKind::Plan,
        MessageKind::Subtask,
        MessageKind::PolicyDraft,
        MessageKind::ParseReport,
        MessageKind::TestReport,
        MessageKind::TuningReport,
        MessageKind::UserFeedback,
        MessageKind::Escalation,
        MessageKind::Acceptance,
        MessageKind::Failure,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementsPayload {
    pub spec: TaskSpec,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanPayload {
    pub plan: SubtaskPlan,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskPayload {
    pub subtask: super::Subtask,
    pub index: usize,
    pub total: usize,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDraftPayload {
    /// Extracted policy source; empty when the reply contained none.
    pub source: String,
    /// 1-based attempt number within the current plan.
    pub attempt: usize,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSubject {
    Plan,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseReportPayload {
    pub subject: ReportSubject,
    pub ok: bool,
    pub diagnostics: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReportPayload {
    pub report: TestReport,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningReportPayload {
    pub directive: Option<TuningDirective>,
    pub params_before: BTreeMap<String, f64>,
    pub params_after: BTreeMap<String, f64>,
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
    /// Canonical text of the policy after this step.
    pub policy_source: String,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserFeedbackPayload {
    pub feedback: UserFeedback,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscalationPayload {
    pub reason: String,
    pub escalation: Option<EscalationReport>,
    pub previous_plan: Option<SubtaskPlan>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptancePayload {
    pub accepted_policy: String,
    pub final_report: TestReport,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailurePayload {
    pub error: String,
    #[serde(default)]
    pub notes: String,
}

/// Kind-specific message content. The variant always agrees with the kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Requirements(RequirementsPayload),
    Plan(PlanPayload),
    Subtask(SubtaskPayload),
    PolicyDraft(PolicyDraftPayload),
    ParseReport(ParseReportPayload),
    TestReport(Box<TestReportPayload>),
    TuningReport(Box<TuningReportPayload>),
    UserFeedback(UserFeedbackPayload),
    Escalation(Box<EscalationPayload>),
    Acceptance(Box<AcceptancePayload>),
    Failure(FailurePayload),
}

#[derive(Debug, Error)]
#[error("payload does not match kind {kind:?}: {source}")]
pub struct PayloadError {
    pub kind: MessageKind,
    #[source]
    pub source: serde_json::Error,
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Requirements(_) => MessageKind::Requirements,
            Payload::Plan(_) => MessageKind::Plan,
            Payload::Subtask(_) => MessageKind::Subtask,
            Payload::PolicyDraft(_) => MessageKind::PolicyDraft,
            Payload::ParseReport(_) => MessageKind::ParseReport,
            Payload::TestReport(_) => MessageKind::TestReport,
            Payload::TuningReport(_) => MessageKind::TuningReport,
            Payload::UserFeedback(_) => MessageKind::UserFeedback,
            Payload::Escalation(_) => MessageKind::Escalation,
            Payload::Acceptance(_) => MessageKind::Acceptance,
            Payload::Failure(_) => MessageKind::Failure,
        }
    }

    pub fn notes(&self) -> &str {
        match self {
            Payload::Requirements(p) => &p.notes,
            Payload::Plan(p) => &p.notes,
            Payload::Subtask(p) => &p.notes,
            Payload::PolicyDraft(p) => &p.notes,
            Payload::ParseReport(p) => &p.notes,
            Payload::TestReport(p) => &p.notes,
            Payload::TuningReport(p) => &p.notes,
            Payload::UserFeedback(p) => &p.notes,
            Payload::Escalation(p) => &p.notes,
            Payload::Acceptance(p) => &p.notes,
            Payload::Failure(p) => &p.notes,
        }
    }

    pub fn to_value(&self) -> Value {
        let v = match self {
            Payload::Requirements(p) => serde_json::to_value(p),
            Payload::Plan(p) => serde_json::to_value(p),
            Payload::Subtask(p) => serde_json::to_value(p),
            Payload::PolicyDraft(p) => serde_json::to_value(p),
            Payload::ParseReport(p) => serde_json::to_value(p),
            Payload::TestReport(p) => serde_json::to_value(p),
            Payload::TuningReport(p) => serde_json::to_value(p),
            Payload::UserFeedback(p) => serde_json::to_value(p),
            Payload::Escalation(p) => serde_json::to_value(p),
            Payload::Acceptance(p) => serde_json::to_value(p),
            Payload::Failure(p) => serde_json::to_value(p),
        };
        v.expect("payloads serialize to JSON")
    }

    /// Decodes `value` under the schema selected by `kind`.
    pub fn from_value(kind: MessageKind, value: Value) -> Result<Payload, PayloadError> {
        fn de<T: serde::de::DeserializeOwned>(kind: MessageKind, v: Value) -> Result<T, PayloadError> {
            serde_json::from_value(v).map_err(|source| PayloadError { kind, source })
        }
        Ok(match kind {
            MessageKind::Requirements => Payload::Requirements(de(kind, value)?),
            MessageKind::Plan => Payload::Plan(de(kind, value)?),
            MessageKind::Subtask => Payload::Subtask(de(kind, value)?),
            MessageKind::PolicyDraft => Payload::PolicyDraft(de(kind, value)?),
            MessageKind::ParseReport => Payload::ParseReport(de(kind, value)?),
            MessageKind::TestReport => Payload::TestReport(Box::new(de(kind, value)?)),
            MessageKind::TuningReport => Payload::TuningReport(Box::new(de(kind, value)?)),
            MessageKind::UserFeedback => Payload::UserFeedback(de(kind, value)?),
            MessageKind::Escalation => Payload::Escalation(Box::new(de(kind, value)?)),
            MessageKind::Acceptance => Payload::Acceptance(Box::new(de(kind, value)?)),
            MessageKind::Failure => Payload::Failure(de(kind, value)?),
        })
    }
}

/// Total check that `value` is a well-formed payload for `kind`.
pub fn payload_matches(kind: MessageKind, value: &Value) -> bool {
    Payload::from_value(kind, value.clone()).is_ok()
}

/// One entry of a session transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MessageRecord", into = "MessageRecord")]
pub struct Message {
    pub session_id: String,
    pub seq: u64,
    pub from: Party,
    pub to: Party,
    /// Phase the session entered with the transition that produced this message.
    pub phase: Phase,
    pub payload: Payload,
    /// RFC 3339 wall-clock time.
    pub timestamp: String,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRecord {
    session_id: String,
    seq: u64,
    from: Party,
    to: Party,
    kind: MessageKind,
    phase: Phase,
    payload: Value,
    timestamp: String,
}

impl TryFrom<MessageRecord> for Message {
    type Error = PayloadError;
    fn try_from(r: MessageRecord) -> Result<Self, Self::Error> {
        Ok(Message {
            session_id: r.session_id,
            seq: r.seq,
            from: r.from,
            to: r.to,
            phase: r.phase,
            payload: Payload::from_value(r.kind, r.payload)?,
            timestamp: r.timestamp,
        })
    }
}

impl From<Message> for MessageRecord {
    fn from(m: Message) -> Self {
        MessageRecord {
            kind: m.payload.kind(),
            payload: m.payload.to_value(),
            session_id: m.session_id,
            seq: m.seq,
            from: m.from,
            to: m.to,
            phase: m.phase,
            timestamp: m.timestamp,
        }
    }
}
