//! Policy evaluation.
//!
//! Policies are lowered to flat postfix programs so the simulator can run
//! them every tick without walking boxed trees.

use serde::{Deserialize, Serialize};

use super::{BinOp, CmpOp, Cond, Expr, Func, Policy, SENSORS};

/// Denominators smaller than this in magnitude saturate the quotient.
pub const DIV_EPSILON: f64 = 1e-9;
/// Magnitude of a saturated quotient.
pub const DIV_SATURATION: f64 = 1e9;
/// Bound applied to both outputs; the simulator applies the real robot limits.
pub const OUTPUT_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub dist_to_target: f64,
    pub bearing_to_target: f64,
    pub obst_front: f64,
    pub obst_left: f64,
    pub obst_right: f64,
    pub own_speed: f64,
}

impl SensorFrame {
    fn values(&self) -> [f64; 6] {
        [self.dist_to_target, self.bearing_to_target, self.obst_front, self.obst_left, self.obst_right, self.own_speed]
    }

    pub fn is_valid(&self) -> bool {
        let distances = [self.dist_to_target, self.obst_front, self.obst_left, self.obst_right];
        distances.iter().all(|d| d.is_finite() && *d >= 0.0)
            && self.own_speed.is_finite()
            && self.bearing_to_target > -std::f64::consts::PI
            && self.bearing_to_target <= std::f64::consts::PI
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriveCommand {
    pub v: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Sensor(usize),
    Param(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Clamp,
    Abs,
    Sign,
    Cmp(CmpOp),
    True,
    False,
    Not,
    And,
    Or,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    guard: Vec<Op>,
    v: Vec<Op>,
    w: Vec<Op>,
}

/// A policy lowered for repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledPolicy {
    params: Vec<f64>,
    rules: Vec<CompiledRule>,
}

fn lower_expr(e: &Expr, params: &[&str], out: &mut Vec<Op>) {
    match e {
        Expr::Num(n) => out.push(Op::Const(*n)),
        Expr::Var(name) => {
            if let Some(i) = params.iter().position(|p| p == name) {
                out.push(Op::Param(i));
            } else if let Some(i) = SENSORS.iter().position(|s| s == name) {
                out.push(Op::Sensor(i));
            } else {
                // unreachable for validated policies
                out.push(Op::Const(0.0));
            }
        }
        Expr::Neg(inner) => {
            lower_expr(inner, params, out);
            out.push(Op::Neg);
        }
        Expr::Bin(op, a, b) => {
            lower_expr(a, params, out);
            lower_expr(b, params, out);
            out.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
            });
        }
        Expr::Call(func, args) => {
            for a in args {
                lower_expr(a, params, out);
            }
            out.push(match func {
                Func::Min => Op::Min,
                Func::Max => Op::Max,
                Func::Clamp => Op::Clamp,
                Func::Abs => Op::Abs,
                Func::Sign => Op::Sign,
            });
        }
    }
}

fn lower_cond(c: &Cond, params: &[&str], out: &mut Vec<Op>) {
    match c {
        Cond::Lit(true) => out.push(Op::True),
        Cond::Lit(false) => out.push(Op::False),
        Cond::Cmp(op, a, b) => {
            lower_expr(a, params, out);
            lower_expr(b, params, out);
            out.push(Op::Cmp(*op));
        }
        Cond::Not(inner) => {
            lower_cond(inner, params, out);
            out.push(Op::Not);
        }
        Cond::And(a, b) => {
            lower_cond(a, params, out);
            lower_cond(b, params, out);
            out.push(Op::And);
        }
        Cond::Or(a, b) => {
            lower_cond(a, params, out);
            lower_cond(b, params, out);
            out.push(Op::Or);
        }
    }
}

fn saturating_div(x: f64, y: f64) -> f64 {
    if y.abs() < DIV_EPSILON {
        if x == 0.0 {
            0.0
        } else {
            x.signum() * DIV_SATURATION
        }
    } else {
        x / y
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn truth(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

fn run(ops: &[Op], sensors: &[f64; 6], params: &[f64], stack: &mut Vec<f64>) -> f64 {
    stack.clear();
    for op in ops {
        let value = match *op {
            Op::Const(c) => c,
            Op::Sensor(i) => sensors[i],
            Op::Param(i) => params[i],
            Op::True => 1.0,
            Op::False => 0.0,
            Op::Neg => -stack.pop().unwrap_or(0.0),
            Op::Abs => stack.pop().unwrap_or(0.0).abs(),
            Op::Sign => sign(stack.pop().unwrap_or(0.0)),
            Op::Not => truth(stack.pop().unwrap_or(0.0) == 0.0),
            Op::Clamp => {
                let hi = stack.pop().unwrap_or(0.0);
                let lo = stack.pop().unwrap_or(0.0);
                let x = stack.pop().unwrap_or(0.0);
                x.max(lo).min(hi)
            }
            binary => {
                let b = stack.pop().unwrap_or(0.0);
                let a = stack.pop().unwrap_or(0.0);
                match binary {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => saturating_div(a, b),
                    Op::Min => a.min(b),
                    Op::Max => a.max(b),
                    Op::And => truth(a != 0.0 && b != 0.0),
                    Op::Or => truth(a != 0.0 || b != 0.0),
                    Op::Cmp(cmp) => truth(match cmp {
                        CmpOp::Lt => a < b,
                        CmpOp::Le => a <= b,
                        CmpOp::Gt => a > b,
                        CmpOp::Ge => a >= b,
                        CmpOp::Eq => a == b,
                    }),
                    _ => unreachable!("unary and leaf ops handled above"),
                }
            }
        };
        stack.push(value);
    }
    stack.pop().unwrap_or(0.0)
}

fn bound_output(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-OUTPUT_BOUND, OUTPUT_BOUND)
    }
}

impl CompiledPolicy {
    pub fn new(policy: &Policy) -> Self {
        let names: Vec<&str> = policy.params.iter().map(|p| p.name.as_str()).collect();
        let rules = policy
            .rules
            .iter()
            .map(|r| {
                let mut guard = Vec::new();
                let mut v = Vec::new();
                let mut w = Vec::new();
                lower_cond(&r.guard, &names, &mut guard);
                lower_expr(&r.v, &names, &mut v);
                lower_expr(&r.w, &names, &mut w);
                CompiledRule { guard, v, w }
            })
            .collect();
        CompiledPolicy { params: policy.params.iter().map(|p| p.value).collect(), rules }
    }

    /// Index of the rule that fires for this frame, if any.
    pub fn firing_rule(&self, frame: &SensorFrame) -> Option<usize> {
        let sensors = frame.values();
        let mut stack = Vec::with_capacity(16);
        self.rules.iter().position(|r| run(&r.guard, &sensors, &self.params, &mut stack) != 0.0)
    }

    pub fn evaluate(&self, frame: &SensorFrame) -> DriveCommand {
        let sensors = frame.values();
        let mut stack = Vec::with_capacity(16);
        for rule in &self.rules {
            if run(&rule.guard, &sensors, &self.params, &mut stack) != 0.0 {
                let v = run(&rule.v, &sensors, &self.params, &mut stack);
                let w = run(&rule.w, &sensors, &self.params, &mut stack);
                return DriveCommand { v: bound_output(v), w: bound_output(w) };
            }
        }
        DriveCommand::default()
    }
}

/// Evaluates the first rule whose guard holds; stops when none does.
pub fn evaluate(policy: &Policy, frame: &SensorFrame) -> DriveCommand {
    CompiledPolicy::new(policy).evaluate(frame)
}
