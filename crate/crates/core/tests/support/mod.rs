//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the evaluator or simulator under test; the
//! implementations are written from the documented semantics alone.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use crewforge::backend::{ScriptEntry, ScriptFile};
use crewforge::orchestrator::SessionConfig;
use crewforge::policy::{BinOp, CmpOp, Cond, DriveCommand, Expr, Func, Param, Policy, Rule, SensorFrame, SENSORS};
use crewforge::simulator::Scenario;
use crewforge::tester::{FeedbackCategory, UserFeedback, Verdict};
use rand::Rng;

pub fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

pub fn asset(rel: &str) -> String {
    let path = assets().join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// random valid policies

const LITERALS: [f64; 8] = [0.0, 1.0, 0.5, 2.0, 1e-12, 3.25e7, 0.1, 1.0 / 3.0];

fn number(rng: &mut impl Rng) -> f64 {
    let magnitude = match rng.random_range(0..4) {
        0 => LITERALS[rng.random_range(0..LITERALS.len())],
        1 => rng.random_range(0.0..10.0),
        2 => f64::from(rng.random_range(0..100u32)),
        _ => 10f64.powi(rng.random_range(-15..15)) * rng.random_range(1.0..10.0),
    };
    if rng.random_bool(0.3) {
        -magnitude
    } else {
        magnitude
    }
}

fn expr(rng: &mut impl Rng, params: &[String], depth: u32) -> Expr {
    let leaf = depth == 0 || rng.random_bool(0.3);
    if leaf {
        return match rng.random_range(0..3) {
            0 => Expr::Num(number(rng)),
            1 => Expr::Var(SENSORS[rng.random_range(0..SENSORS.len())].to_string()),
            _ if !params.is_empty() => Expr::Var(params[rng.random_range(0..params.len())].clone()),
            _ => Expr::Num(number(rng)),
        };
    }
    match rng.random_range(0..3) {
        0 => {
            // the parser folds a minus on a literal into the literal
            let inner = expr(rng, params, depth - 1);
            match inner {
                Expr::Num(n) => Expr::Num(-n),
                other => Expr::Neg(Box::new(other)),
            }
        }
        1 => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][rng.random_range(0..4)];
            Expr::Bin(op, Box::new(expr(rng, params, depth - 1)), Box::new(expr(rng, params, depth - 1)))
        }
        _ => {
            let func = [Func::Min, Func::Max, Func::Clamp, Func::Abs, Func::Sign][rng.random_range(0..5)];
            let args = (0..func.arity()).map(|_| expr(rng, params, depth - 1)).collect();
            Expr::Call(func, args)
        }
    }
}

fn cond(rng: &mut impl Rng, params: &[String], depth: u32) -> Cond {
    let leaf = depth == 0 || rng.random_bool(0.4);
    if leaf {
        if rng.random_bool(0.15) {
            return Cond::Lit(rng.random_bool(0.5));
        }
        let op = [CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq][rng.random_range(0..5)];
        return Cond::Cmp(op, expr(rng, params, 2), expr(rng, params, 2));
    }
    match rng.random_range(0..3) {
        0 => Cond::Not(Box::new(cond(rng, params, depth - 1))),
        1 => Cond::And(Box::new(cond(rng, params, depth - 1)), Box::new(cond(rng, params, depth - 1))),
        _ => Cond::Or(Box::new(cond(rng, params, depth - 1)), Box::new(cond(rng, params, depth - 1))),
    }
}

/// A policy that passes validation: unique names, values inside bounds,
/// only declared names referenced, at least one rule.
pub fn random_policy(rng: &mut impl Rng) -> Policy {
    let n_params = rng.random_range(0..5);
    let params: Vec<Param> = (0..n_params)
        .map(|i| {
            let lo = number(rng).clamp(-1e6, 1e6);
            let width = rng.random_range(0.01..100.0);
            let hi = lo + width;
            let value = if rng.random_bool(0.2) { lo } else { lo + width * rng.random_range(0.0..1.0) };
            Param { name: format!("p{i}_{}", ["gain", "dist", "cap", "k"][i % 4]), value, lo, hi }
        })
        .collect();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let rules = (0..rng.random_range(1..5))
        .map(|i| Rule {
            name: format!("r{i}"),
            guard: cond(rng, &names, 3),
            v: expr(rng, &names, 4),
            w: expr(rng, &names, 4),
        })
        .collect();
    Policy { name: format!("gen{}", rng.random_range(0..1000)), params, rules }
}

pub fn random_frame(rng: &mut impl Rng) -> SensorFrame {
    let range = |rng: &mut dyn rand::RngCore| {
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.0..10.0)
        }
    };
    SensorFrame {
        dist_to_target: range(rng),
        bearing_to_target: if rng.random_bool(0.05) { PI } else { rng.random_range(-PI..PI).max(-PI + 1e-12) },
        obst_front: range(rng),
        obst_left: range(rng),
        obst_right: range(rng),
        own_speed: rng.random_range(-2.0..2.0),
    }
}

// ---------------------------------------------------------------------------
// reference tree-walking evaluator

pub struct Env<'a> {
    pub params: BTreeMap<&'a str, f64>,
    pub frame: &'a SensorFrame,
}

impl<'a> Env<'a> {
    pub fn new(policy: &'a Policy, frame: &'a SensorFrame) -> Self {
        Env { params: policy.params.iter().map(|p| (p.name.as_str(), p.value)).collect(), frame }
    }

    fn lookup(&self, name: &str) -> f64 {
        let f = self.frame;
        match name {
            "dist_to_target" => f.dist_to_target,
            "bearing_to_target" => f.bearing_to_target,
            "obst_front" => f.obst_front,
            "obst_left" => f.obst_left,
            "obst_right" => f.obst_right,
            "own_speed" => f.own_speed,
            other => self.params[other],
        }
    }
}

pub fn walk_expr(e: &Expr, env: &Env) -> f64 {
    match e {
        Expr::Num(n) => *n,
        Expr::Var(name) => env.lookup(name),
        Expr::Neg(inner) => -walk_expr(inner, env),
        Expr::Bin(op, a, b) => {
            let (a, b) = (walk_expr(a, env), walk_expr(b, env));
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                // a NaN denominator divides normally
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                BinOp::Div if !(b.abs() < 1e-9) => a / b,
                BinOp::Div if a == 0.0 => 0.0,
                BinOp::Div if a > 0.0 => 1e9,
                BinOp::Div if a < 0.0 => -1e9,
                BinOp::Div => f64::NAN,
            }
        }
        Expr::Call(func, args) => {
            let v: Vec<f64> = args.iter().map(|a| walk_expr(a, env)).collect();
            match func {
                Func::Min => v[0].min(v[1]),
                Func::Max => v[0].max(v[1]),
                Func::Clamp => v[0].max(v[1]).min(v[2]),
                Func::Abs => v[0].abs(),
                Func::Sign if v[0] > 0.0 => 1.0,
                Func::Sign if v[0] < 0.0 => -1.0,
                Func::Sign => 0.0,
            }
        }
    }
}

pub fn walk_cond(c: &Cond, env: &Env) -> bool {
    match c {
        Cond::Lit(b) => *b,
        Cond::Cmp(op, a, b) => {
            let (a, b) = (walk_expr(a, env), walk_expr(b, env));
            match op {
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
                CmpOp::Eq => a == b,
            }
        }
        Cond::Not(inner) => !walk_cond(inner, env),
        Cond::And(a, b) => walk_cond(a, env) && walk_cond(b, env),
        Cond::Or(a, b) => walk_cond(a, env) || walk_cond(b, env),
    }
}

fn bounded(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1e6, 1e6)
    }
}

/// Index of the first rule whose guard holds.
pub fn walk_firing(policy: &Policy, frame: &SensorFrame) -> Option<usize> {
    let env = Env::new(policy, frame);
    policy.rules.iter().position(|r| walk_cond(&r.guard, &env))
}

pub fn walk_policy(policy: &Policy, frame: &SensorFrame) -> DriveCommand {
    let env = Env::new(policy, frame);
    match walk_firing(policy, frame) {
        Some(i) => {
            let r = &policy.rules[i];
            DriveCommand { v: bounded(walk_expr(&r.v, &env)), w: bounded(walk_expr(&r.w, &env)) }
        }
        None => DriveCommand { v: 0.0, w: 0.0 },
    }
}

/// `|a − b| ≤ tol · max(1, |a|, |b|)`, treating equal infinities as equal.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

// ---------------------------------------------------------------------------
// reference closed-loop simulation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTick {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

/// Person position found by walking the path's cumulative arrival times.
pub fn oracle_target(s: &Scenario, t: f64) -> (f64, f64) {
    let mut arrive = 0.0;
    for k in 0..s.target_path.len() - 1 {
        let (a, b) = (s.target_path[k], s.target_path[k + 1]);
        if a.speed <= 0.0 {
            return (a.x, a.y);
        }
        let len = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        let depart = arrive;
        arrive += len / a.speed;
        if t <= arrive {
            let s = if arrive > depart { (t - depart) * a.speed / len } else { 1.0 };
            return (a.x + s * (b.x - a.x), a.y + s * (b.y - a.y));
        }
    }
    let last = s.target_path[s.target_path.len() - 1];
    (last.x, last.y)
}

fn wrap(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// Sensor reading computed in the robot's body frame.
pub fn oracle_sense(s: &Scenario, x: f64, y: f64, theta: f64, tx: f64, ty: f64, own_speed: f64) -> SensorFrame {
    let (c, sn) = (theta.cos(), theta.sin());
    let body = |px: f64, py: f64| {
        let (dx, dy) = (px - x, py - y);
        (c * dx + sn * dy, -sn * dx + c * dy)
    };
    let (fx, fy) = body(tx, ty);
    let (mut front, mut left, mut right) = (s.sensor_max, s.sensor_max, s.sensor_max);
    for o in &s.obstacles {
        let (bx, by) = body(o.x, o.y);
        let bearing = by.atan2(bx);
        let gap = (bx * bx + by * by).sqrt() - o.radius;
        let sixth = PI / 6.0;
        if bearing.abs() <= sixth {
            front = front.min(gap);
        } else if bearing > sixth && bearing <= PI / 2.0 {
            left = left.min(gap);
        } else if bearing < -sixth && bearing >= -PI / 2.0 {
            right = right.min(gap);
        }
    }
    let clip = |r: f64| r.max(0.0).min(s.sensor_max);
    SensorFrame {
        dist_to_target: (fx * fx + fy * fy).sqrt(),
        bearing_to_target: wrap(fy.atan2(fx)),
        obst_front: clip(front),
        obst_left: clip(left),
        obst_right: clip(right),
        own_speed,
    }
}

/// Euler integration of the unicycle under an arbitrary controller.
pub fn oracle_run(s: &Scenario, mut control: impl FnMut(&SensorFrame) -> DriveCommand) -> Vec<OracleTick> {
    assert_eq!(s.sensor_noise_std, 0.0, "the oracle models noiseless sensing only");
    let n = (s.duration_s / s.dt + 1e-9).floor() as usize;
    let (mut x, mut y, mut theta) = (s.robot_start.x, s.robot_start.y, s.robot_start.theta);
    let mut speed = 0.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = s.dt * k as f64;
        let (tx, ty) = oracle_target(s, t);
        out.push(OracleTick { t, x, y, theta, tx, ty });
        let cmd = control(&oracle_sense(s, x, y, theta, tx, ty, speed));
        let v = cmd.v.max(-s.robot.v_max).min(s.robot.v_max);
        let w = cmd.w.max(-s.robot.w_max).min(s.robot.w_max);
        speed = v;
        x += s.dt * v * theta.cos();
        y += s.dt * v * theta.sin();
        theta = wrap(theta + s.dt * w);
    }
    out
}

pub fn oracle_simulate(policy: &Policy, s: &Scenario) -> Vec<OracleTick> {
    oracle_run(s, |f| walk_policy(policy, f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMetrics {
    pub band_fraction: f64,
    pub rms_dist_error: f64,
    pub collisions: usize,
    pub target_lost: bool,
}

/// Metrics recomputed from recorded robot and target positions.
pub fn rescan(s: &Scenario, ticks: &[(f64, f64, f64, f64)]) -> OracleMetrics {
    let skip = ticks.len() / 10;
    let errors: Vec<f64> = ticks[skip..]
        .iter()
        .map(|&(x, y, tx, ty)| ((tx - x).powi(2) + (ty - y).powi(2)).sqrt() - s.desired_follow_dist)
        .collect();
    let n = errors.len() as f64;
    let collisions = ticks
        .iter()
        .filter(|&&(x, y, _, _)| {
            s.obstacles.iter().any(|o| ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt() - o.radius < s.robot.radius)
        })
        .count();
    OracleMetrics {
        band_fraction: if errors.is_empty() {
            1.0
        } else {
            errors.iter().filter(|e| e.abs() <= s.band_tolerance).count() as f64 / n
        },
        rms_dist_error: if errors.is_empty() { 0.0 } else { (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt() },
        collisions,
        target_lost: ticks.iter().any(|&(x, y, tx, ty)| ((tx - x).powi(2) + (ty - y).powi(2)).sqrt() > s.lose_dist),
    }
}

// ---------------------------------------------------------------------------
// tuner oracle

/// Minimizer of `f` over `[lo, hi]` on a grid of the given step.
pub fn grid_argmin(lo: f64, hi: f64, step: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| (lo + step * i as f64).min(hi)).min_by(|a, b| f(*a).total_cmp(&f(*b))).expect("grid is non-empty")
}

/// One-parameter policy whose tuning objective is supplied by the caller.
pub fn scalar_policy(lo: f64, hi: f64, start: f64) -> Policy {
    crewforge::policy::parse(&format!(
        "policy scalar {{ param p = {start} [{lo}, {hi}] rule r: when true -> drive(v = p, w = 0) }}"
    ))
    .expect("scalar policy parses")
}

// ---------------------------------------------------------------------------
// fuzzed session inputs; entry 0 of each pool is well formed

pub const GOOD_PLAN: &str = r#"{"subtasks": [{"id": "follow", "title": "Follow", "behavior": "Drive toward the person and keep the following distance.", "acceptance": "distance stays in band"}]}"#;

pub fn fenced(policy: &str) -> String {
    format!("```policy\n{policy}\n```")
}

pub fn analyst_pool() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::reply(GOOD_PLAN),
        ScriptEntry::reply(r#"{"subtasks": []}"#),
        ScriptEntry::reply(
            r#"{"subtasks": [{"id": "a", "title": "t", "behavior": "b"}, {"id": "a", "title": "t", "behavior": "b", "acceptance": "x"}]}"#,
        ),
        ScriptEntry::reply("I would rather not."),
        ScriptEntry::reply(""),
        ScriptEntry { error: Some("analyst unavailable".into()), ..Default::default() },
        ScriptEntry { pattern: Some("no prompt says this".into()), response: GOOD_PLAN.into(), error: None },
    ]
}

pub fn programmer_pool() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::reply(fenced(&asset("policies/follow.policy"))),
        ScriptEntry::reply(fenced(&asset("policies/proportional.policy"))),
        ScriptEntry::reply(fenced("policy fixed { rule r: when true -> drive(v = 0.5, w = bearing_to_target) }")),
        ScriptEntry::reply(fenced("policy broken { rule r: when true -> drive(v = gian, w = 0) }")),
        ScriptEntry::reply(fenced("policy creep { param c = 0.1 [0, 0.2] rule r: when true -> drive(v = c, w = 0) }")),
        ScriptEntry::reply("no code today"),
        ScriptEntry { error: Some("programmer unavailable".into()), ..Default::default() },
    ]
}

pub fn tester_pool() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::reply("Looks acceptable."),
        ScriptEntry::reply("Too slow overall.\nprioritize: gain, follow_dist"),
        ScriptEntry::reply("prioritize: nonexistent"),
        ScriptEntry::reply(" "),
        ScriptEntry { error: Some("tester unavailable".into()), ..Default::default() },
    ]
}

pub fn feedback_pool() -> Vec<UserFeedback> {
    let adjust = |c| UserFeedback { verdict: Verdict::Adjust, categories: vec![c], notes: String::new() };
    vec![
        UserFeedback::approve(),
        UserFeedback { verdict: Verdict::Reject, categories: vec![], notes: "no".into() },
        adjust(FeedbackCategory::TooClose),
        adjust(FeedbackCategory::TooFar),
        adjust(FeedbackCategory::HitObstacle),
        adjust(FeedbackCategory::TooSlow),
        adjust(FeedbackCategory::TooJerky),
    ]
}

/// Picks entry 0 with probability 3/5, otherwise any entry.
fn pick<T: Clone>(rng: &mut impl Rng, pool: &[T], max: usize) -> Vec<T> {
    let n = rng.random_range(0..max);
    (0..n)
        .map(|_| if rng.random_bool(0.6) { pool[0].clone() } else { pool[rng.random_range(0..pool.len())].clone() })
        .collect()
}

pub fn random_script(rng: &mut impl Rng) -> ScriptFile {
    ScriptFile {
        analyst: pick(rng, &analyst_pool(), 4),
        programmer: pick(rng, &programmer_pool(), 8),
        tester: pick(rng, &tester_pool(), 12),
        feedback: pick(rng, &feedback_pool(), 6),
    }
}

/// Small budgets so fuzzed sessions finish quickly.
pub fn random_config(rng: &mut impl Rng) -> SessionConfig {
    let mut c = SessionConfig {
        k_adjust: rng.random_range(1..3),
        k_replan: rng.random_range(0..3),
        k_review: rng.random_range(0..3),
        ..SessionConfig::default()
    };
    c.thresholds.min_band_fraction = [0.0, 0.5, 0.9][rng.random_range(0..3)];
    c.tuning.rounds = 1;
    c.tuning.evals_per_round = 3;
    c
}
