//! The rule-based control policy language emitted by the programmer role.
//!
//! A policy declares bounded tunable parameters and an ordered list of
//! guarded drive rules. The first rule whose guard holds decides the
//! command; when none holds the robot stops.

mod eval;
mod lexer;
mod parser;
mod printer;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eval::{evaluate, CompiledPolicy, DriveCommand, SensorFrame, DIV_EPSILON, DIV_SATURATION, OUTPUT_BOUND};
pub use parser::parse;
pub use printer::{format_number, print};

/// The closed sensor vocabulary available to every policy.
pub const SENSORS: [&str; 6] =
    ["dist_to_target", "bearing_to_target", "obst_front", "obst_left", "obst_right", "own_speed"];

pub(crate) const KEYWORDS: [&str; 15] = [
    "policy", "param", "rule", "when", "drive", "and", "or", "not", "true", "false", "min", "max", "clamp", "abs",
    "sign",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub name: String,
    pub params: Vec<Param>,
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub guard: Cond,
    pub v: Expr,
    pub w: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Min,
    Max,
    Clamp,
    Abs,
    Sign,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Clamp => "clamp",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
            Func::Abs | Func::Sign => 1,
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "min" => Func::Min,
            "max" => Func::Max,
            "clamp" => Func::Clamp,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
        }
    }
}

/// Real-valued expression.
///
/// The parser folds a unary minus applied to a literal into a negative
/// literal, so `Neg` never wraps `Num` in a parsed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Boolean expression used as a rule guard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cond {
    Lit(bool),
    Cmp(CmpOp, Expr, Expr),
    Not(Box<Cond>),
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
}

impl Expr {
    /// Visits every identifier referenced by the expression.
    pub fn for_each_var<'a>(&'a self, f: &mut dyn FnMut(&'a str)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(name) => f(name),
            Expr::Neg(inner) => inner.for_each_var(f),
            Expr::Bin(_, a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.for_each_var(f)),
        }
    }

    pub fn references(&self, name: &str) -> bool {
        let mut found = false;
        self.for_each_var(&mut |v| found |= v == name);
        found
    }
}

impl Cond {
    pub fn for_each_var<'a>(&'a self, f: &mut dyn FnMut(&'a str)) {
        match self {
            Cond::Lit(_) => {}
            Cond::Cmp(_, a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
            Cond::Not(inner) => inner.for_each_var(f),
            Cond::And(a, b) | Cond::Or(a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
        }
    }

    pub fn references(&self, name: &str) -> bool {
        let mut found = false;
        self.for_each_var(&mut |v| found |= v == name);
        found
    }

    /// Comparisons appearing anywhere in the guard.
    pub fn comparisons(&self) -> Vec<(&Expr, &Expr)> {
        let mut out = Vec::new();
        fn walk<'a>(c: &'a Cond, out: &mut Vec<(&'a Expr, &'a Expr)>) {
            match c {
                Cond::Lit(_) => {}
                Cond::Cmp(_, a, b) => out.push((a, b)),
                Cond::Not(inner) => walk(inner, out),
                Cond::And(a, b) | Cond::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }
}

/// Source position, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("unknown identifier \"{name}\" at {pos}")]
    UnknownIdentifier { name: String, pos: Pos },
    #[error("duplicate name \"{name}\" at {pos}")]
    DuplicateName { name: String, pos: Pos },
    #[error("bound violation for param \"{name}\": {detail}")]
    BoundViolation { name: String, detail: String },
    #[error("type mismatch at {pos}: {detail}")]
    TypeMismatch { pos: Pos, detail: String },
    #[error("policy has no rules")]
    NoRules,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("unknown param \"{0}\"")]
    UnknownParam(String),
    #[error("non-finite value for param \"{0}\"")]
    NonFinite(String),
}

impl Policy {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_values(&self) -> BTreeMap<String, f64> {
        self.params.iter().map(|p| (p.name.clone(), p.value)).collect()
    }

    /// Checks the structural invariants that `parse` guarantees.
    ///
    /// Useful for policies assembled in code rather than parsed.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let unknown = Pos { line: 0, col: 0 };
        let mut names: Vec<&str> = Vec::new();
        for p in &self.params {
            if names.contains(&p.name.as_str()) || SENSORS.contains(&p.name.as_str()) {
                return Err(ValidationError::DuplicateName { name: p.name.clone(), pos: unknown });
            }
            names.push(&p.name);
            check_bounds(p)?;
        }
        if self.rules.is_empty() {
            return Err(ValidationError::NoRules);
        }
        let mut rule_names: Vec<&str> = Vec::new();
        for r in &self.rules {
            if rule_names.contains(&r.name.as_str()) {
                return Err(ValidationError::DuplicateName { name: r.name.clone(), pos: unknown });
            }
            rule_names.push(&r.name);
            let mut bad = None;
            let mut check = |v: &str| {
                if bad.is_none() && !names.contains(&v) && !SENSORS.contains(&v) {
                    bad = Some(v.to_string());
                }
            };
            r.guard.for_each_var(&mut check);
            r.v.for_each_var(&mut check);
            r.w.for_each_var(&mut check);
            if let Some(name) = bad {
                return Err(ValidationError::UnknownIdentifier { name, pos: unknown });
            }
        }
        Ok(())
    }

    /// Non-fatal diagnostics: divisions whose denominator can be near zero.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for rule in &self.rules {
            let mut visit = |e: &Expr, which: &str| {
                let mut denominators = Vec::new();
                collect_denominators(e, &mut denominators);
                for d in denominators {
                    if self.may_vanish(d) {
                        out.push(format!(
                            "rule {}: {which} divides by `{}`, which may be near zero",
                            rule.name,
                            printer::print_expr(d)
                        ));
                    }
                }
            };
            for (a, b) in rule.guard.comparisons() {
                visit(a, "guard");
                visit(b, "guard");
            }
            visit(&rule.v, "v");
            visit(&rule.w, "w");
        }
        out
    }

    fn may_vanish(&self, denom: &Expr) -> bool {
        match denom {
            Expr::Num(x) => x.abs() < DIV_EPSILON,
            Expr::Var(name) => match self.param(name) {
                Some(p) => p.lo <= DIV_EPSILON && p.hi >= -DIV_EPSILON,
                // sensor readings can be zero
                None => true,
            },
            _ => false,
        }
    }

    /// Returns a copy with the named parameters replaced, each clamped into
    /// its declared bounds. Rules are untouched.
    pub fn set_params(&self, updates: &BTreeMap<String, f64>) -> Result<Policy, ParamError> {
        let mut next = self.clone();
        for (name, &value) in updates {
            let param = next
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| ParamError::UnknownParam(name.clone()))?;
            if !value.is_finite() {
                return Err(ParamError::NonFinite(name.clone()));
            }
            param.value = value.clamp(param.lo, param.hi);
        }
        Ok(next)
    }
}

fn collect_denominators<'a>(e: &'a Expr, out: &mut Vec<&'a Expr>) {
    match e {
        Expr::Num(_) | Expr::Var(_) => {}
        Expr::Neg(inner) => collect_denominators(inner, out),
        Expr::Bin(op, a, b) => {
            if *op == BinOp::Div {
                out.push(b);
            }
            collect_denominators(a, out);
            collect_denominators(b, out);
        }
        Expr::Call(_, args) => args.iter().for_each(|a| collect_denominators(a, out)),
    }
}

pub(crate) fn check_bounds(p: &Param) -> Result<(), ValidationError> {
    if !(p.lo.is_finite() && p.hi.is_finite() && p.value.is_finite()) {
        return Err(ValidationError::BoundViolation {
            name: p.name.clone(),
            detail: "bounds and value must be finite".into(),
        });
    }
    if p.lo >= p.hi {
        return Err(ValidationError::BoundViolation {
            name: p.name.clone(),
            detail: format!("lower bound {} must be below upper bound {}", p.lo, p.hi),
        });
    }
    if p.value < p.lo || p.value > p.hi {
        return Err(ValidationError::BoundViolation {
            name: p.name.clone(),
            detail: format!("value {} outside [{}, {}]", p.value, p.lo, p.hi),
        });
    }
    Ok(())
}

/// Convenience wrapper over [`Policy::set_params`].
pub fn set_params(policy: &Policy, updates: &BTreeMap<String, f64>) -> Result<Policy, ParamError> {
    policy.set_params(updates)
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print(self))
    }
}
