//! Read-only projections of session state for the HTTP API and terminal.

use crewforge::orchestrator::{Phase, SessionState};
use crewforge::roles::{Message, Payload};
use crewforge::tester::{ScenarioOutcome, TestReport, Verdict};
use serde::{Deserialize, Serialize};

/// Number of trailing messages included in a view.
pub const VIEW_MESSAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub tuning_rounds_used: u32,
    pub escalations_used: u32,
    pub reviews_used: u32,
    pub codegen_retries_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub pass: bool,
    pub objective: f64,
    pub scenarios: Vec<ScenarioOutcome>,
}

impl From<&TestReport> for MetricsSummary {
    fn from(r: &TestReport) -> Self {
        MetricsSummary { pass: r.pass, objective: r.objective, scenarios: r.scenarios.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSessionView {
    pub session_id: String,
    pub phase: Phase,
    pub awaiting_feedback: bool,
    pub counters: Counters,
    pub transcript_len: usize,
    pub last_messages: Vec<Message>,
    pub policy: Option<String>,
    pub metrics: Option<MetricsSummary>,
}

impl ApiSessionView {
    pub fn of(state: &SessionState) -> Self {
        let n = state.transcript.len();
        ApiSessionView {
            session_id: state.session_id.clone(),
            phase: state.phase,
            awaiting_feedback: state.phase == Phase::UserReview && state.pending_feedback.is_none(),
            counters: Counters {
                tuning_rounds_used: state.tuning_rounds_used,
                escalations_used: state.escalations_used,
                reviews_used: state.reviews_used,
                codegen_retries_used: state.codegen_retries_used,
            },
            transcript_len: n,
            last_messages: state.transcript[n.saturating_sub(VIEW_MESSAGES)..].to_vec(),
            policy: state.current_policy.as_ref().map(|p| p.to_string()),
            metrics: state.last_test_report().map(MetricsSummary::from),
        }
    }
}

/// One-line description of a message payload.
pub fn summarize(m: &Message) -> String {
    match &m.payload {
        Payload::Requirements(p) => format!("{} requirements", p.spec.requirements.len()),
        Payload::Plan(p) => {
            let ids: Vec<&str> = p.plan.subtasks.iter().map(|s| s.id.as_str()).collect();
            format!("{} subtasks [{}]", ids.len(), ids.join(", "))
        }
        Payload::Subtask(p) => format!("{}/{} {}", p.index + 1, p.total, p.subtask.id),
        Payload::PolicyDraft(p) => {
            let name = p.source.lines().find_map(|l| l.trim().strip_prefix("policy ")).unwrap_or("?");
            format!("attempt {}: policy {}", p.attempt, name.trim_end_matches('{').trim())
        }
        Payload::ParseReport(p) if p.ok => format!("{:?} ok, {} warnings", p.subject, p.warnings.len()),
        Payload::ParseReport(p) => format!("{:?} rejected: {}", p.subject, p.diagnostics.join("; ")),
        Payload::TestReport(p) => {
            let bands: Vec<String> =
                p.report.scenarios.iter().map(|s| format!("{} {:.3}", s.name, s.metrics.band_fraction)).collect();
            let verdict = if p.report.pass { "pass" } else { "fail" };
            format!("{verdict}, objective {:.4}, band {}", p.report.objective, bands.join(" "))
        }
        Payload::TuningReport(p) => match (p.objective_before, p.objective_after) {
            (Some(a), Some(b)) => format!("objective {a:.4} -> {b:.4}"),
            _ => "parameters nudged by operator directive".to_string(),
        },
        Payload::UserFeedback(p) => {
            let fb = &p.feedback;
            match fb.verdict {
                Verdict::Adjust => format!("Adjust {:?}", fb.categories),
                v => format!("{v:?}"),
            }
        }
        Payload::Escalation(p) => p.reason.clone(),
        Payload::Acceptance(p) => format!("accepted, objective {:.4}", p.final_report.objective),
        Payload::Failure(p) => p.error.clone(),
    }
}

/// Transcript line printed by `run`.
pub fn transcript_line(m: &Message) -> String {
    format!(
        "{:>3} {:<16} {:>10} -> {:<10} {:<12} {}",
        m.seq,
        m.phase.to_string(),
        format!("{:?}", m.from).to_lowercase(),
        format!("{:?}", m.to).to_lowercase(),
        format!("{:?}", m.payload.kind()),
        summarize(m)
    )
}
