use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Role;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbalanced `{brace}` at byte {offset}; write `{brace}{brace}` for a literal brace")]
    Unbalanced { brace: char, offset: usize },
    #[error("invalid placeholder name `{0}`")]
    BadName(String),
    #[error("missing binding for placeholder `{0}`")]
    MissingPlaceholder(String),
    #[error("binding `{0}` does not match any placeholder")]
    UnknownPlaceholder(String),
    #[error("cannot read template {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

fn split(template: &str) -> Result<Vec<Piece>, TemplateError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < template.len() {
        let c = bytes[i];
        if c == b'{' && bytes.get(i + 1) == Some(&b'{') {
            text.push('{');
            i += 2;
        } else if c == b'}' && bytes.get(i + 1) == Some(&b'}') {
            text.push('}');
            i += 2;
        } else if c == b'{' {
            let close = template[i + 1..].find('}').ok_or(TemplateError::Unbalanced { brace: '{', offset: i })?;
            let name = &template[i + 1..i + 1 + close];
            let valid = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid {
                return Err(TemplateError::BadName(name.to_string()));
            }
            if !text.is_empty() {
                pieces.push(Piece::Text(std::mem::take(&mut text)));
            }
            pieces.push(Piece::Slot(name.to_string()));
            i += close + 2;
        } else if c == b'}' {
            return Err(TemplateError::Unbalanced { brace: '}', offset: i });
        } else {
            let ch = template[i..].chars().next().expect("in bounds");
            text.push(ch);
            i += ch.len_utf8();
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

/// A role's instruction template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInstruction", into = "RawInstruction")]
pub struct RoleInstruction {
    role: Role,
    template: String,
    placeholder_names: BTreeSet<String>,
    #[serde(skip)]
    pieces: Vec<Piece>,
}

#[derive(Serialize, Deserialize)]
struct RawInstruction {
    role: Role,
    template: String,
}

impl TryFrom<RawInstruction> for RoleInstruction {
    type Error = TemplateError;
    fn try_from(raw: RawInstruction) -> Result<Self, Self::Error> {
        RoleInstruction::new(raw.role, raw.template)
    }
}

impl From<RoleInstruction> for RawInstruction {
    fn from(i: RoleInstruction) -> Self {
        RawInstruction { role: i.role, template: i.template }
    }
}

impl RoleInstruction {
    pub fn new(role: Role, template: impl Into<String>) -> Result<Self, TemplateError> {
        let template = template.into();
        let pieces = split(&template)?;
        let placeholder_names = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        Ok(RoleInstruction { role, template, placeholder_names, pieces })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn placeholder_names(&self) -> &BTreeSet<String> {
        &self.placeholder_names
    }

    /// Substitutes every placeholder. Bindings must cover the placeholder set
    /// exactly.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        if let Some(extra) = bindings.keys().find(|k| !self.placeholder_names.contains(*k)) {
            return Err(TemplateError::UnknownPlaceholder(extra.clone()));
        }
        if let Some(missing) = self.placeholder_names.iter().find(|n| !bindings.contains_key(*n)) {
            return Err(TemplateError::MissingPlaceholder(missing.clone()));
        }
        let mut out = String::with_capacity(self.template.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => out.push_str(&bindings[name]),
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper over [`RoleInstruction::render`].
pub fn render_instruction(
    instr: &RoleInstruction,
    bindings: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    instr.render(bindings)
}

const ANALYST: &str = include_str!("../../templates/analyst.txt");
const PROGRAMMER: &str = include_str!("../../templates/programmer.txt");
const TESTER: &str = include_str!("../../templates/tester.txt");

/// One instruction per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSet {
    pub analyst: RoleInstruction,
    pub programmer: RoleInstruction,
    pub tester: RoleInstruction,
}

impl InstructionSet {
    /// The shipped templates. They are reconstructions written for this
    /// project; tune them for the model you use.
    pub fn defaults() -> Self {
        InstructionSet {
            analyst: RoleInstruction::new(Role::Analyst, ANALYST).expect("shipped template"),
            programmer: RoleInstruction::new(Role::Programmer, PROGRAMMER).expect("shipped template"),
            tester: RoleInstruction::new(Role::Tester, TESTER).expect("shipped template"),
        }
    }

    /// Loads `analyst.txt`, `programmer.txt` and `tester.txt` from `dir`,
    /// falling back to the shipped template for any file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = InstructionSet::defaults();
        for role in Role::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { path: path.display().to_string(), detail: e.to_string() })?;
            *set.get_mut(role) = RoleInstruction::new(role, text)?;
        }
        Ok(set)
    }

    pub fn get(&self, role: Role) -> &RoleInstruction {
        match role {
            Role::Analyst => &self.analyst,
            Role::Programmer => &self.programmer,
            Role::Tester => &self.tester,
        }
    }

    fn get_mut(&mut self, role: Role) -> &mut RoleInstruction {
        match role {
            Role::Analyst => &mut self.analyst,
            Role::Programmer => &mut self.programmer,
            Role::Tester => &mut self.tester,
        }
    }
}
