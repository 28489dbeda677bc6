//! Prompt assembly and reply extraction for the three roles. Each role only
//! sees the bindings its template declares.

use std::collections::BTreeMap;

use crate::backend::ChatRequest;
use crate::policy::{Policy, SENSORS};
use crate::roles::{InstructionSet, Role, SubtaskPlan, TaskSpec, TemplateError};
use crate::tester::{TestReport, UserFeedback};

use super::SessionConfig;

fn bullets(items: &[String]) -> String {
    let lines: Vec<String> = items.iter().filter(|s| !s.trim().is_empty()).map(|s| format!("- {s}")).collect();
    if lines.is_empty() {
        "none".into()
    } else {
        lines.join("\n")
    }
}

fn request(
    role: Role,
    instructions: &InstructionSet,
    bindings: BTreeMap<String, String>,
    config: &SessionConfig,
) -> Result<ChatRequest, TemplateError> {
    let prompt = instructions.get(role).render(&bindings)?;
    Ok(ChatRequest::single(
        format!("You are the {role} of a three-role robot software team."),
        prompt,
        config.backend.max_tokens,
        config.backend.temperature,
    ))
}

pub(crate) fn analyst_request(
    instructions: &InstructionSet,
    config: &SessionConfig,
    spec: &TaskSpec,
    escalation: Option<&str>,
) -> Result<ChatRequest, TemplateError> {
    let bindings = BTreeMap::from([
        ("robot_params".to_string(), spec.describe_robot()),
        ("requirements".to_string(), bullets(&spec.requirements)),
        ("constraints".to_string(), bullets(&spec.constraints)),
        ("escalation".to_string(), escalation.unwrap_or("none").to_string()),
    ]);
    request(Role::Analyst, instructions, bindings, config)
}

pub(crate) fn sensor_listing() -> String {
    let meaning = [
        "distance to the followed person, m",
        "bearing to the person, rad in (-pi, pi], positive to the left",
        "closest obstacle clearance ahead (+-30 deg), m",
        "closest obstacle clearance on the left (30 to 90 deg), m",
        "closest obstacle clearance on the right (-90 to -30 deg), m",
        "current forward speed, m/s",
    ];
    SENSORS.iter().zip(meaning).map(|(s, m)| format!("- {s}: {m}")).collect::<Vec<_>>().join("\n")
}

pub(crate) fn programmer_request(
    instructions: &InstructionSet,
    config: &SessionConfig,
    plan: &SubtaskPlan,
    diagnostics: &[String],
) -> Result<ChatRequest, TemplateError> {
    let bindings = BTreeMap::from([
        ("plan".to_string(), plan.describe()),
        ("sensors".to_string(), sensor_listing()),
        ("parse_report".to_string(), bullets(diagnostics)),
    ]);
    request(Role::Programmer, instructions, bindings, config)
}

pub(crate) fn summarize_report(report: &TestReport) -> String {
    let mut out = format!(
        "objective {:.4} ({})\n",
        report.objective,
        if report.pass { "all thresholds met" } else { "thresholds not met" }
    );
    for s in &report.scenarios {
        out.push_str(&format!(
            "- {}: in-band {:.3}, rms error {:.3} m, collisions {}, target lost {}{}\n",
            s.name,
            s.metrics.band_fraction,
            s.metrics.rms_dist_error,
            s.metrics.collisions,
            s.metrics.target_lost,
            if s.violations.is_empty() { String::new() } else { format!(" [{}]", s.violations.join("; ")) }
        ));
    }
    out
}

pub(crate) fn tester_request(
    instructions: &InstructionSet,
    config: &SessionConfig,
    policy: &Policy,
    report: Option<&TestReport>,
    feedback: Option<&UserFeedback>,
) -> Result<ChatRequest, TemplateError> {
    let feedback_text = match feedback {
        None => "none".to_string(),
        Some(fb) => {
            let cats: Vec<String> = fb.categories.iter().map(|c| format!("{c:?}")).collect();
            format!("{:?} [{}] {}", fb.verdict, cats.join(", "), fb.notes).trim_end().to_string()
        }
    };
    let bindings = BTreeMap::from([
        ("policy".to_string(), policy.to_string()),
        ("test_report".to_string(), report.map(summarize_report).unwrap_or_else(|| "none".into())),
        ("user_feedback".to_string(), feedback_text),
    ]);
    request(Role::Tester, instructions, bindings, config)
}

fn fenced<'a>(reply: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("```{tag}");
    let start = reply.find(&open)?;
    let after = &reply[start + open.len()..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    Some(body.find("```").map_or(body, |end| &body[..end]))
}

/// Pulls a plan out of the analyst's reply: a ```json block, or the outermost
/// braces.
pub(crate) fn extract_plan(reply: &str) -> Result<SubtaskPlan, String> {
    let text = match fenced(reply, "json") {
        Some(body) => body,
        None => {
            let start = reply.find('{').ok_or("reply contains no JSON object")?;
            let end = reply.rfind('}').ok_or("reply contains no JSON object")?;
            if end < start {
                return Err("reply contains no JSON object".into());
            }
            &reply[start..=end]
        }
    };
    serde_json::from_str(text).map_err(|e| format!("plan JSON is invalid: {e}"))
}

/// Pulls policy source out of the programmer's reply: a ```policy block, else
/// the text from the first line starting with `policy`. Empty if neither.
pub(crate) fn extract_policy(reply: &str) -> String {
    if let Some(body) = fenced(reply, "policy") {
        return body.trim().to_string();
    }
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        if line.trim_start().starts_with("policy") {
            let rest = &reply[offset..];
            let rest = rest.find("```").map_or(rest, |end| &rest[..end]);
            return rest.trim().to_string();
        }
        offset += line.len();
    }
    String::new()
}

/// Parameter names listed on a `prioritize:` line, filtered to those the
/// policy declares.
pub(crate) fn extract_priorities(reply: &str, policy: &Policy) -> Vec<String> {
    let mut out = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        let Some(rest) = line.get(..11).filter(|p| p.eq_ignore_ascii_case("prioritize:")).map(|_| &line[11..]) else {
            continue;
        };
        for name in rest.split(',').map(str::trim) {
            if policy.param(name).is_some() && !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
        }
    }
    out
}
