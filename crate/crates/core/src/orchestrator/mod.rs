//! The collaboration state machine.
//!
//! A session moves through analysis, code generation, simulation testing,
//! tuning and operator review. Every transition appends at least one message
//! to the transcript; failures loop back to the analyst a bounded number of
//! times before the session fails.

mod agents;
mod config;
mod store;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Backends, ChatBackend, ChatRequest, HttpBackend, ScriptFile, ScriptedBackend};
use crate::policy::{self, Policy};
use crate::roles::{
    validate_plan, AcceptancePayload, EscalationPayload, FailurePayload, InstructionSet, Message, ParseReportPayload,
    Party, Payload, PlanPayload, PolicyDraftPayload, ReportSubject, RequirementsPayload, Role, SpecError,
    SubtaskPayload, SubtaskPlan, TaskSpec, TestReportPayload, TuningReportPayload, UserFeedbackPayload,
};
use crate::simulator::Scenario;
use crate::tester::{
    self, compose_escalation, evaluate_suite, feedback_to_directive, Direction, FeedbackError, TestReport, TuneError,
    TuningDirective, TuningHint, UserFeedback, Verdict,
};

pub use config::{BackendBinding, BackendConfig, BackendKind, ConfigError, SessionConfig, TuningConfig};
pub use store::{
    normalize_transcript, script_from_session, transcript_to_ndjson, ReplayOutcome, SessionRecord, SessionStore,
    SessionWriter, StoreError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Intake,
    Analysis,
    PlanValidation,
    CodeGen,
    StaticValidation,
    SimTest,
    Tuning,
    UserReview,
    Escalation,
    Accepted,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 11] = [
        Phase::Intake,
        Phase::Analysis,
        Phase::PlanValidation,
        Phase::CodeGen,
        Phase::StaticValidation,
        Phase::SimTest,
        Phase::Tuning,
        Phase::UserReview,
        Phase::Escalation,
        Phase::Accepted,
        Phase::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Accepted | Phase::Failed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid spec: {0}")]
    InvalidSpec(#[from] SpecError),
    #[error("invalid config: {0}")]
    InvalidConfig(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("session is already {0}")]
    Terminal(Phase),
    #[error("session is waiting for operator feedback")]
    AwaitingFeedback,
    #[error("operation requires phase {expected}, session is in {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("invalid feedback: {0}")]
    InvalidFeedback(#[from] FeedbackError),
}

/// Supplies operator feedback when a session reaches review without any
/// submitted feedback.
pub trait FeedbackSource: Send {
    fn next_feedback(&mut self, state: &SessionState) -> Option<UserFeedback>;
}

/// Feedback replayed from a list; optionally approves once the list runs out.
#[derive(Debug, Clone, Default)]
pub struct ScriptedFeedback {
    queue: VecDeque<UserFeedback>,
    approve_when_empty: bool,
}

impl ScriptedFeedback {
    pub fn new(items: impl IntoIterator<Item = UserFeedback>, approve_when_empty: bool) -> Self {
        ScriptedFeedback { queue: items.into_iter().collect(), approve_when_empty }
    }
}

impl FeedbackSource for ScriptedFeedback {
    fn next_feedback(&mut self, _: &SessionState) -> Option<UserFeedback> {
        self.queue.pop_front().or_else(|| self.approve_when_empty.then(UserFeedback::approve))
    }
}

/// Everything a transition may call out to.
pub struct Deps {
    pub backends: Backends,
    pub instructions: InstructionSet,
    /// Scenarios with the session robot's limits applied.
    pub suite: Vec<Scenario>,
    pub feedback: Option<Box<dyn FeedbackSource>>,
}

impl fmt::Debug for Deps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deps")
            .field("backends", &self.backends)
            .field("suite", &self.suite.iter().map(|s| &s.name).collect::<Vec<_>>())
            .field("feedback", &self.feedback.is_some())
            .finish()
    }
}

impl Deps {
    /// Scripted backends and feedback from `script`, suite and templates from
    /// `config`.
    pub fn scripted(config: &SessionConfig, spec: &TaskSpec, script: &ScriptFile) -> Result<Deps, ConfigError> {
        Ok(Deps {
            backends: Backends::scripted(script),
            instructions: load_instructions(config)?,
            suite: config.load_suite(spec)?,
            feedback: Some(Box::new(ScriptedFeedback::new(script.feedback.clone(), false))),
        })
    }

    /// Backends bound per `config`, with no feedback source attached.
    pub fn from_config(
        config: &SessionConfig,
        spec: &TaskSpec,
        script: Option<&ScriptFile>,
    ) -> Result<Deps, ConfigError> {
        Ok(Deps {
            backends: build_backends(config, script)?,
            instructions: load_instructions(config)?,
            suite: config.load_suite(spec)?,
            feedback: None,
        })
    }
}

/// Per-role backends as bound in `config`; scripted roles replay `script`.
pub fn build_backends(config: &SessionConfig, script: Option<&ScriptFile>) -> Result<Backends, ConfigError> {
    let b = config.backend.binding;
    let make = |role: Role, kind: BackendKind| -> Result<Box<dyn ChatBackend>, ConfigError> {
        match kind {
            BackendKind::Http => Ok(Box::new(HttpBackend::new(config.backend.http()))),
            BackendKind::Scripted => {
                let script = script.ok_or_else(|| ConfigError::Invalid {
                    field: format!("backend.binding.{role}"),
                    message: "a scripted backend needs a script file".into(),
                })?;
                let entries = match role {
                    Role::Analyst => &script.analyst,
                    Role::Programmer => &script.programmer,
                    Role::Tester => &script.tester,
                };
                Ok(Box::new(ScriptedBackend::new(entries.clone())))
            }
        }
    };
    Ok(Backends::new(
        make(Role::Analyst, b.analyst)?,
        make(Role::Programmer, b.programmer)?,
        make(Role::Tester, b.tester)?,
    ))
}

pub fn load_instructions(config: &SessionConfig) -> Result<InstructionSet, ConfigError> {
    match &config.templates_dir {
        None => Ok(InstructionSet::defaults()),
        Some(dir) => InstructionSet::load_dir(dir)
            .map_err(|e| ConfigError::Invalid { field: "templates_dir".into(), message: e.to_string() }),
    }
}

/// One collaboration session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub phase: Phase,
    pub spec: TaskSpec,
    pub config: SessionConfig,
    pub plan: Option<SubtaskPlan>,
    pub current_policy: Option<Policy>,
    pub tuning_rounds_used: u32,
    pub escalations_used: u32,
    pub transcript: Vec<Message>,
    pub rng_seed: u64,
    /// Draft re-asks made for the current plan.
    pub codegen_retries_used: u32,
    /// Adjust requests received from the operator.
    pub reviews_used: u32,
    /// Diagnostics of the last rejected draft.
    pub last_diagnostics: Vec<String>,
    pub pending_feedback: Option<UserFeedback>,
    pub pending_directive: Option<TuningDirective>,
    pub last_feedback: Option<UserFeedback>,
    pub pending_escalation: Option<EscalationPayload>,
    /// Test reports and directives since the current plan was accepted.
    pub reports: Vec<TestReport>,
    pub directives: Vec<TuningDirective>,
}

struct Transition {
    to: Phase,
    messages: Vec<(Party, Party, Payload)>,
}

impl Transition {
    fn new(to: Phase) -> Self {
        Transition { to, messages: Vec::new() }
    }

    fn with(mut self, from: Party, to: Party, payload: Payload) -> Self {
        self.messages.push((from, to, payload));
        self
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Opens a session: validates inputs and records the requirements.
pub fn start_session(spec: TaskSpec, config: SessionConfig, rng_seed: u64) -> Result<SessionState, SessionError> {
    spec.validate()?;
    config.validate()?;
    let mut state = SessionState {
        session_id: uuid::Uuid::new_v4().to_string(),
        phase: Phase::Intake,
        spec: spec.clone(),
        config,
        plan: None,
        current_policy: None,
        tuning_rounds_used: 0,
        escalations_used: 0,
        transcript: Vec::new(),
        rng_seed,
        codegen_retries_used: 0,
        reviews_used: 0,
        last_diagnostics: Vec::new(),
        pending_feedback: None,
        pending_directive: None,
        last_feedback: None,
        pending_escalation: None,
        reports: Vec::new(),
        directives: Vec::new(),
    };
    state.append(
        Party::User,
        Party::Analyst,
        Payload::Requirements(RequirementsPayload { spec, notes: String::new() }),
    );
    Ok(state)
}

/// Upper bound on the number of `step` calls any session can take.
pub fn step_bound(config: &SessionConfig) -> u64 {
    let k = u64::from(config.k_adjust);
    let codegen = 2 * (k + 1);
    let testing = 2 * k + 1;
    let reviews = (u64::from(config.k_review) + 1) * (2 * k + 2);
    let per_plan = 3 + codegen + testing + reviews + 1;
    (u64::from(config.k_replan) + 1) * per_plan + 2
}

impl SessionState {
    fn append(&mut self, from: Party, to: Party, payload: Payload) {
        let msg = Message {
            session_id: self.session_id.clone(),
            seq: self.transcript.len() as u64,
            from,
            to,
            phase: self.phase,
            payload,
            timestamp: now(),
        };
        self.transcript.push(msg);
    }

    fn apply(&mut self, t: Transition) -> Phase {
        debug_assert!(!t.messages.is_empty(), "every transition records a message");
        self.phase = t.to;
        for (from, to, payload) in t.messages {
            self.append(from, to, payload);
        }
        self.phase
    }

    pub fn last_test_report(&self) -> Option<&TestReport> {
        self.reports.last()
    }

    /// Number of times the session entered Analysis.
    pub fn analysis_entries(&self) -> usize {
        self.transcript.iter().filter(|m| matches!(m.payload, Payload::Plan(_))).count()
    }
}

fn failure(role: Role, what: &str, e: &dyn fmt::Display) -> Transition {
    Transition::new(Phase::Failed).with(
        role.into(),
        Party::User,
        Payload::Failure(FailurePayload { error: format!("{what}: {e}"), notes: String::new() }),
    )
}

fn call(
    deps: &mut Deps,
    role: Role,
    req: Result<ChatRequest, crate::roles::TemplateError>,
) -> Result<String, Transition> {
    let req = req.map_err(|e| failure(role, &format!("{role} prompt could not be rendered"), &e))?;
    deps.backends
        .complete(role, &req)
        .map(|r| r.content)
        .map_err(|e: BackendError| failure(role, &format!("{role} backend failed"), &e))
}

/// Performs exactly one phase transition.
pub fn step(state: &mut SessionState, deps: &mut Deps) -> Result<Phase, StepError> {
    if state.phase.is_terminal() {
        return Err(StepError::Terminal(state.phase));
    }
    let t = match state.phase {
        Phase::Intake => analyze(state, deps, None),
        Phase::Analysis => check_plan(state),
        Phase::PlanValidation => plan_validated(state, deps),
        Phase::CodeGen => generate(state, deps),
        Phase::StaticValidation => check_draft(state),
        Phase::SimTest => sim_test(state, deps),
        Phase::Tuning => tune_step(state, deps),
        Phase::UserReview => review(state, deps)?,
        Phase::Escalation => replan(state, deps),
        Phase::Accepted | Phase::Failed => unreachable!("terminal phases are rejected above"),
    };
    Ok(state.apply(t))
}

/// Steps until the session is terminal. A session that somehow exceeds
/// [`step_bound`] is failed rather than left running.
pub fn run_to_completion(state: &mut SessionState, deps: &mut Deps) -> Result<Phase, StepError> {
    let bound = step_bound(&state.config);
    let mut steps = 0;
    while !state.phase.is_terminal() {
        if steps >= bound {
            let t = Transition::new(Phase::Failed).with(
                Party::Analyst,
                Party::User,
                Payload::Failure(FailurePayload {
                    error: format!("step bound {bound} exceeded"),
                    notes: String::new(),
                }),
            );
            return Ok(state.apply(t));
        }
        step(state, deps)?;
        steps += 1;
    }
    Ok(state.phase)
}

/// Records operator feedback; the next `step` acts on it.
pub fn submit_user_feedback(state: &mut SessionState, fb: UserFeedback) -> Result<(), StepError> {
    if state.phase != Phase::UserReview {
        return Err(StepError::WrongPhase { expected: Phase::UserReview, actual: state.phase });
    }
    if state.pending_feedback.is_some() {
        return Err(StepError::WrongPhase { expected: Phase::UserReview, actual: state.phase });
    }
    fb.validate()?;
    state.append(
        Party::User,
        Party::Tester,
        Payload::UserFeedback(UserFeedbackPayload { feedback: fb.clone(), notes: String::new() }),
    );
    state.pending_feedback = Some(fb);
    Ok(())
}

fn analyze(state: &mut SessionState, deps: &mut Deps, escalation: Option<String>) -> Transition {
    let req = agents::analyst_request(&deps.instructions, &state.config, &state.spec, escalation.as_deref());
    let reply = match call(deps, Role::Analyst, req) {
        Ok(r) => r,
        Err(t) => return t,
    };
    let (plan, notes) = match agents::extract_plan(&reply) {
        Ok(plan) => (plan, String::new()),
        Err(e) => (SubtaskPlan::default(), format!("analyst reply held no usable plan: {e}")),
    };
    state.plan = Some(plan.clone());
    Transition::new(Phase::Analysis).with(Party::Analyst, Party::Programmer, Payload::Plan(PlanPayload { plan, notes }))
}

fn check_plan(state: &mut SessionState) -> Transition {
    let plan = state.plan.as_ref().expect("plan is set after Analysis");
    let report = validate_plan(plan, &state.spec);
    let (hard, advisory): (Vec<_>, Vec<_>) = report.violations.iter().partition(|v| v.is_hard());
    Transition::new(Phase::PlanValidation).with(
        Party::Programmer,
        Party::Analyst,
        Payload::ParseReport(ParseReportPayload {
            subject: ReportSubject::Plan,
            ok: report.ok,
            diagnostics: hard.iter().map(ToString::to_string).collect(),
            warnings: advisory.iter().map(ToString::to_string).collect(),
            notes: String::new(),
        }),
    )
}

fn plan_validated(state: &mut SessionState, deps: &mut Deps) -> Transition {
    let plan = state.plan.clone().expect("plan is set after Analysis");
    let report = validate_plan(&plan, &state.spec);
    if !report.ok {
        let reasons: Vec<String> = report.violations.iter().filter(|v| v.is_hard()).map(ToString::to_string).collect();
        let payload = EscalationPayload {
            reason: format!("plan failed validation: {}", reasons.join("; ")),
            escalation: None,
            previous_plan: Some(plan),
            notes: String::new(),
        };
        if state.escalations_used >= state.config.k_replan {
            return Transition::new(Phase::Failed).with(
                Party::Programmer,
                Party::User,
                Payload::Failure(FailurePayload {
                    error: format!("{}; re-plan budget of {} exhausted", payload.reason, state.config.k_replan),
                    notes: String::new(),
                }),
            );
        }
        state.escalations_used += 1;
        let brief = escalation_brief(&payload);
        let t = analyze(state, deps, Some(brief));
        if t.to == Phase::Failed {
            return t;
        }
        let mut messages = vec![(Party::Programmer, Party::Analyst, Payload::Escalation(Box::new(payload)))];
        messages.extend(t.messages);
        return Transition { to: Phase::Analysis, messages };
    }
    state.codegen_retries_used = 0;
    state.last_diagnostics.clear();
    state.reports.clear();
    state.directives.clear();
    let total = plan.subtasks.len();
    let mut t = Transition::new(Phase::CodeGen);
    for (index, subtask) in plan.subtasks.into_iter().enumerate() {
        t = t.with(
            Party::Analyst,
            Party::Programmer,
            Payload::Subtask(SubtaskPayload { subtask, index, total, notes: String::new() }),
        );
    }
    t
}

fn generate(state: &mut SessionState, deps: &mut Deps) -> Transition {
    let plan = state.plan.as_ref().expect("plan is set after Analysis");
    let req = agents::programmer_request(&deps.instructions, &state.config, plan, &state.last_diagnostics);
    let reply = match call(deps, Role::Programmer, req) {
        Ok(r) => r,
        Err(t) => return t,
    };
    let source = agents::extract_policy(&reply);
    let notes = if source.is_empty() { "reply held no policy source".to_string() } else { String::new() };
    Transition::new(Phase::StaticValidation).with(
        Party::Programmer,
        Party::Tester,
        Payload::PolicyDraft(PolicyDraftPayload { source, attempt: state.codegen_retries_used as usize + 1, notes }),
    )
}

fn last_draft(state: &SessionState) -> &str {
    state
        .transcript
        .iter()
        .rev()
        .find_map(|m| match &m.payload {
            Payload::PolicyDraft(d) => Some(d.source.as_str()),
            _ => None,
        })
        .expect("a draft precedes StaticValidation")
}

fn check_draft(state: &mut SessionState) -> Transition {
    let source = last_draft(state).to_string();
    match policy::parse(&source) {
        Ok(p) => {
            let warnings = p.warnings();
            state.current_policy = Some(p);
            state.last_diagnostics.clear();
            Transition::new(Phase::SimTest).with(
                Party::Tester,
                Party::Programmer,
                Payload::ParseReport(ParseReportPayload {
                    subject: ReportSubject::Policy,
                    ok: true,
                    diagnostics: vec![],
                    warnings,
                    notes: String::new(),
                }),
            )
        }
        Err(e) => {
            let diagnostics =
                vec![if source.is_empty() { "no policy source found in the reply".to_string() } else { e.to_string() }];
            let report = Payload::ParseReport(ParseReportPayload {
                subject: ReportSubject::Policy,
                ok: false,
                diagnostics: diagnostics.clone(),
                warnings: vec![],
                notes: String::new(),
            });
            if state.codegen_retries_used < state.config.k_adjust {
                state.codegen_retries_used += 1;
                state.last_diagnostics = diagnostics;
                Transition::new(Phase::CodeGen).with(Party::Tester, Party::Programmer, report)
            } else {
                let attempts = state.codegen_retries_used + 1;
                escalate(
                    state,
                    Party::Programmer,
                    format!("no valid policy after {attempts} drafts"),
                    vec![(Party::Tester, Party::Programmer, report)],
                )
            }
        }
    }
}

/// Moves to Escalation, recording why and what the analyst should know.
fn escalate(
    state: &mut SessionState,
    from: Party,
    reason: String,
    mut messages: Vec<(Party, Party, Payload)>,
) -> Transition {
    let payload = EscalationPayload {
        reason,
        escalation: compose_escalation(&state.reports, &state.directives).ok(),
        previous_plan: state.plan.clone(),
        notes: String::new(),
    };
    state.pending_escalation = Some(payload.clone());
    state.current_policy = None;
    messages.push((from, Party::Analyst, Payload::Escalation(Box::new(payload))));
    Transition { to: Phase::Escalation, messages }
}

fn escalation_brief(payload: &EscalationPayload) -> String {
    let mut out = format!("Reason: {}\n", payload.reason);
    if let Some(report) = &payload.escalation {
        out.push_str(&format!(
            "Worst scenario: {} (objective {:.4})\nViolations:\n",
            report.worst_scenario, report.worst_objective
        ));
        for v in &report.violated_thresholds {
            out.push_str(&format!("- {v}\n"));
        }
        for d in &report.exhausted_directions {
            out.push_str(&format!("Already tried: {:?} {}\n", d.direction, d.param_name));
        }
    }
    if let Some(plan) = &payload.previous_plan {
        out.push_str("Previous plan (amend it or start over):\n");
        out.push_str(&plan.describe());
    }
    out
}

fn sim_test(state: &mut SessionState, deps: &mut Deps) -> Transition {
    let policy = state.current_policy.as_ref().expect("policy is set after StaticValidation");
    let report = evaluate_suite(policy, &deps.suite, &state.config.thresholds, &state.config.objective, state.rng_seed);
    let pass = report.pass;
    state.reports.push(report.clone());
    let msg =
        (Party::Tester, Party::User, Payload::TestReport(Box::new(TestReportPayload { report, notes: String::new() })));
    if pass {
        Transition { to: Phase::UserReview, messages: vec![msg] }
    } else if state.tuning_rounds_used < state.config.k_adjust {
        Transition { to: Phase::Tuning, messages: vec![msg] }
    } else {
        let used = state.tuning_rounds_used;
        escalate(state, Party::Tester, format!("thresholds still unmet after {used} tuning rounds"), vec![msg])
    }
}

/// Moves directive-named params a fixed fraction of their range in the
/// requested direction.
fn nudge(policy: &Policy, directive: &TuningDirective, fraction: f64) -> Policy {
    let mut updates = BTreeMap::new();
    for p in &policy.params {
        let sign = match directive.direction_for(&p.name) {
            Some(Direction::Increase) => 1.0,
            Some(Direction::Decrease) => -1.0,
            _ => continue,
        };
        updates.insert(p.name.clone(), p.value + sign * fraction * (p.hi - p.lo));
    }
    policy.set_params(&updates).expect("updates name declared params with finite values")
}

fn tune_step(state: &mut SessionState, deps: &mut Deps) -> Transition {
    let start = state.current_policy.clone().expect("policy is set after StaticValidation");
    let user_directive = state.pending_directive.take();
    let params_before = start.param_values();
    let nudged = match &user_directive {
        Some(d) => nudge(&start, d, state.config.tuning.nudge_fraction),
        None => start,
    };

    let req = agents::tester_request(
        &deps.instructions,
        &state.config,
        &nudged,
        state.reports.last(),
        state.last_feedback.as_ref(),
    );
    let narration = match call(deps, Role::Tester, req) {
        Ok(r) => r,
        Err(t) => return t,
    };

    let mut directive = user_directive.clone().unwrap_or_default();
    for name in agents::extract_priorities(&narration, &nudged) {
        if directive.direction_for(&name).is_none() {
            directive.hints.push(TuningHint {
                param_name: Some(name),
                direction: Direction::Free,
                reason: "tester asked to try this parameter first".into(),
            });
        }
    }
    let directive = (!directive.hints.is_empty()).then_some(directive);

    let outcome = tester::tune(
        &nudged,
        &deps.suite,
        &state.config.objective,
        directive.as_ref(),
        state.config.tuning.budget(),
        state.rng_seed,
    );
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ (TuneError::NoParams | TuneError::EmptyBudget)) => {
            let note = (
                Party::Tester,
                Party::Programmer,
                Payload::TuningReport(Box::new(TuningReportPayload {
                    directive: directive.clone(),
                    params_before: params_before.clone(),
                    params_after: params_before,
                    objective_before: state.reports.last().map(|r| r.objective),
                    objective_after: None,
                    history: vec![],
                    policy_source: nudged.to_string(),
                    notes: narration,
                })),
            );
            return escalate(state, Party::Tester, format!("tuning impossible: {e}"), vec![note]);
        }
    };
    if let Some(d) = &directive {
        state.directives.push(d.clone());
    }
    state.tuning_rounds_used += 1;
    let tuned = outcome.policy.clone();
    let payload = TuningReportPayload {
        directive,
        params_before,
        params_after: tuned.param_values(),
        objective_before: outcome.history.first().map(|h| h.objective),
        objective_after: Some(outcome.best_objective()),
        history: outcome.history,
        policy_source: tuned.to_string(),
        notes: narration,
    };
    state.current_policy = Some(tuned);
    Transition::new(Phase::SimTest).with(Party::Tester, Party::Programmer, Payload::TuningReport(Box::new(payload)))
}

fn review(state: &mut SessionState, deps: &mut Deps) -> Result<Transition, StepError> {
    let fb = match state.pending_feedback.take() {
        Some(fb) => fb,
        None => {
            let source = deps.feedback.as_mut().ok_or(StepError::AwaitingFeedback)?;
            let fb = source.next_feedback(state).ok_or(StepError::AwaitingFeedback)?;
            fb.validate()?;
            state.append(
                Party::User,
                Party::Tester,
                Payload::UserFeedback(UserFeedbackPayload { feedback: fb.clone(), notes: String::new() }),
            );
            fb
        }
    };
    state.last_feedback = Some(fb.clone());
    let policy = state.current_policy.clone().expect("policy is set in UserReview");
    Ok(match fb.verdict {
        Verdict::Approve => {
            let final_report = state.reports.last().cloned().expect("a passing report precedes UserReview");
            Transition::new(Phase::Accepted).with(
                Party::Tester,
                Party::User,
                Payload::Acceptance(Box::new(AcceptancePayload {
                    accepted_policy: policy.to_string(),
                    final_report,
                    notes: fb.notes,
                })),
            )
        }
        Verdict::Reject => {
            let reason = if fb.notes.is_empty() {
                "operator rejected the policy".to_string()
            } else {
                format!("operator rejected the policy: {}", fb.notes)
            };
            escalate(state, Party::Tester, reason, vec![])
        }
        Verdict::Adjust => {
            let directive = feedback_to_directive(&fb, &policy)?;
            state.reviews_used += 1;
            if state.reviews_used > state.config.k_review {
                let n = state.config.k_review;
                return Ok(escalate(
                    state,
                    Party::Tester,
                    format!("operator still unsatisfied after {n} adjustments"),
                    vec![],
                ));
            }
            state.tuning_rounds_used = 0;
            state.pending_directive = Some(directive.clone());
            let params = policy.param_values();
            Transition::new(Phase::Tuning).with(
                Party::Tester,
                Party::User,
                Payload::TuningReport(Box::new(TuningReportPayload {
                    directive: Some(directive),
                    params_before: params.clone(),
                    params_after: params,
                    objective_before: state.reports.last().map(|r| r.objective),
                    objective_after: None,
                    history: vec![],
                    policy_source: policy.to_string(),
                    notes: "operator feedback translated into a tuning directive".into(),
                })),
            )
        }
    })
}

fn replan(state: &mut SessionState, deps: &mut Deps) -> Transition {
    let payload = state.pending_escalation.take().expect("escalation payload is recorded on entry");
    if state.escalations_used >= state.config.k_replan {
        return Transition::new(Phase::Failed).with(
            Party::Analyst,
            Party::User,
            Payload::Failure(FailurePayload {
                error: format!("{}; re-plan budget of {} exhausted", payload.reason, state.config.k_replan),
                notes: String::new(),
            }),
        );
    }
    state.escalations_used += 1;
    analyze(state, deps, Some(escalation_brief(&payload)))
}
