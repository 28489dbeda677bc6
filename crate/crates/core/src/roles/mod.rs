//! The three collaboration roles, the task they work on, the plans the
//! analyst produces and the typed messages they exchange.

mod instruction;
mod message;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use instruction::{render_instruction, InstructionSet, RoleInstruction, TemplateError};
pub use message::{
    payload_matches, AcceptancePayload, EscalationPayload, FailurePayload, Message, MessageKind, ParseReportPayload,
    Party, Payload, PayloadError, PlanPayload, PolicyDraftPayload, ReportSubject, RequirementsPayload, SubtaskPayload,
    TestReportPayload, TuningReportPayload, UserFeedbackPayload,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Analyst,
    Programmer,
    Tester,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Analyst, Role::Programmer, Role::Tester];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Analyst => "analyst",
            Role::Programmer => "programmer",
            Role::Tester => "tester",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Physical description of the robot handed to the analyst.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotParams {
    /// Wheelbase-equivalent track width, m.
    pub wheelbase: f64,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
    pub robot_radius: f64,
    pub sensor_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub robot_params: RobotParams,
    pub requirements: Vec<String>,
    #[serde(default)]
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct SpecError {
    pub field: String,
    pub message: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let r = &self.robot_params;
        let checks = [
            ("robot_params.wheelbase", "wheelbase", r.wheelbase),
            ("robot_params.max_linear_speed", "max linear speed", r.max_linear_speed),
            ("robot_params.max_angular_speed", "max angular speed", r.max_angular_speed),
            ("robot_params.robot_radius", "robot radius", r.robot_radius),
            ("robot_params.sensor_range", "sensor range", r.sensor_range),
        ];
        for (field, label, value) in checks {
            if !(value.is_finite() && value > 0.0) {
                return Err(SpecError { field: field.into(), message: format!("{label} must be > 0") });
            }
        }
        if self.requirements.iter().all(|r| r.trim().is_empty()) {
            return Err(SpecError {
                field: "requirements".into(),
                message: "at least one requirement is needed".into(),
            });
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<TaskSpec, SpecError> {
        let spec: TaskSpec =
            toml::from_str(text).map_err(|e| SpecError { field: String::new(), message: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Human-readable robot description for prompts.
    pub fn describe_robot(&self) -> String {
        let r = &self.robot_params;
        format!(
            "- wheelbase: {} m\n- max linear speed: {} m/s\n- max angular speed: {} rad/s\n- body radius: {} m\n- range sensor reach: {} m",
            r.wheelbase, r.max_linear_speed, r.max_angular_speed, r.robot_radius, r.sensor_range
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: String,
    pub title: String,
    pub behavior: String,
    #[serde(default)]
    pub acceptance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubtaskPlan {
    pub subtasks: Vec<Subtask>,
    #[serde(default)]
    pub rationale: String,
}

impl SubtaskPlan {
    /// Numbered list used as the programmer's view of the plan.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.subtasks.iter().enumerate() {
            out.push_str(&format!(
                "{}. [{}] {}\n   behavior: {}\n   acceptance: {}\n",
                i + 1,
                s.id,
                s.title,
                s.behavior,
                s.acceptance
            ));
        }
        if !self.rationale.is_empty() {
            out.push_str(&format!("rationale: {}\n", self.rationale));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanViolation {
    EmptyPlan,
    DuplicateId(String),
    MissingAcceptance(String),
    /// Advisory: the subtask shares no keyword with any requirement.
    NoRequirementReference(String),
}

impl PlanViolation {
    pub fn is_hard(&self) -> bool {
        !matches!(self, PlanViolation::NoRequirementReference(_))
    }
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::EmptyPlan => write!(f, "plan has no subtasks"),
            PlanViolation::DuplicateId(id) => write!(f, "duplicate subtask id \"{id}\""),
            PlanViolation::MissingAcceptance(id) => write!(f, "subtask \"{id}\" has no acceptance note"),
            PlanViolation::NoRequirementReference(id) => {
                write!(f, "subtask \"{id}\" does not mention any requirement (advisory)")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<PlanViolation>,
}

const STOPWORDS: [&str; 12] =
    ["with", "from", "that", "this", "into", "than", "when", "must", "should", "keep", "robot", "while"];

fn keywords(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(|w| w.to_lowercase())
        .filter(|w| w.chars().count() >= 4 && !STOPWORDS.contains(&w.as_str()))
        .map(|w| w.chars().take(5).collect())
        .collect()
}

/// Checks a plan before it reaches the programmer. Violations are data;
/// `ok` is true iff there are no hard violations.
pub fn validate_plan(plan: &SubtaskPlan, spec: &TaskSpec) -> ValidationReport {
    let mut violations = Vec::new();
    if plan.subtasks.is_empty() {
        violations.push(PlanViolation::EmptyPlan);
    }
    let mut seen = BTreeSet::new();
    let requirement_words: BTreeSet<String> = spec.requirements.iter().flat_map(|r| keywords(r)).collect();
    for s in &plan.subtasks {
        if !seen.insert(s.id.as_str()) {
            violations.push(PlanViolation::DuplicateId(s.id.clone()));
        }
        if s.acceptance.trim().is_empty() {
            violations.push(PlanViolation::MissingAcceptance(s.id.clone()));
        }
        let words = keywords(&format!("{} {} {}", s.id, s.title, s.behavior));
        if words.is_disjoint(&requirement_words) {
            violations.push(PlanViolation::NoRequirementReference(s.id.clone()));
        }
    }
    ValidationReport { ok: !violations.iter().any(PlanViolation::is_hard), violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quadruped() -> TaskSpec {
        TaskSpec {
            robot_params: RobotParams {
                wheelbase: 0.4,
                max_linear_speed: 1.5,
                max_angular_speed: 2.0,
                robot_radius: 0.3,
                sensor_range: 5.0,
            },
            requirements: vec![
                "Follow a walking person".into(),
                "Avoid obstacles on the way".into(),
                "Maintain a distance of about 1.5 m".into(),
            ],
            constraints: vec![],
        }
    }

    fn subtask(id: &str, title: &str, acceptance: &str) -> Subtask {
        Subtask { id: id.into(), title: title.into(), behavior: String::new(), acceptance: acceptance.into() }
    }

    #[test]
    fn good_plan() {
        let plan = SubtaskPlan {
            subtasks: vec![
                subtask("follow", "Follow the person", "stays within band"),
                subtask("avoid", "Avoid obstacles", "no collisions"),
                subtask("keep_distance", "Maintain distance", "1.5 m"),
            ],
            rationale: String::new(),
        };
        let r = validate_plan(&plan, &quadruped());
        assert!(r.ok);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
    }

    #[test]
    fn duplicate_id() {
        let plan = SubtaskPlan {
            subtasks: vec![subtask("follow", "Follow", "x"), subtask("follow", "Follow again", "y")],
            rationale: String::new(),
        };
        let r = validate_plan(&plan, &quadruped());
        assert!(!r.ok);
        assert!(r.violations.contains(&PlanViolation::DuplicateId("follow".into())));
    }

    #[test]
    fn empty_plan() {
        let r = validate_plan(&SubtaskPlan::default(), &quadruped());
        assert!(!r.ok);
        assert_eq!(r.violations, vec![PlanViolation::EmptyPlan]);
    }

    #[test]
    fn advisory_violations_do_not_fail() {
        let plan = SubtaskPlan { subtasks: vec![subtask("dance", "Dance", "looks nice")], rationale: String::new() };
        let r = validate_plan(&plan, &quadruped());
        assert!(r.ok);
        assert_eq!(r.violations, vec![PlanViolation::NoRequirementReference("dance".into())]);
    }

    #[test]
    fn missing_acceptance_is_hard() {
        let plan = SubtaskPlan { subtasks: vec![subtask("follow", "Follow", " ")], rationale: String::new() };
        assert!(!validate_plan(&plan, &quadruped()).ok);
    }

    #[test]
    fn spec_invariants() {
        quadruped().validate().unwrap();
        let mut s = quadruped();
        s.robot_params.max_linear_speed = 0.0;
        let e = s.validate().unwrap_err();
        assert_eq!(e.to_string(), "max linear speed must be > 0");
        assert_eq!(e.field, "robot_params.max_linear_speed");
        let mut s = quadruped();
        s.requirements.clear();
        assert_eq!(s.validate().unwrap_err().field, "requirements");
    }
}
