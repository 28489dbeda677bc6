//! The tester role's numeric machinery: suite evaluation against
//! thresholds, bounded coordinate-descent tuning, feedback interpretation
//! and escalation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{BinOp, CompiledPolicy, Expr, Func, Policy};
use crate::simulator::{run_compiled, Scenario, ScenarioResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricThresholds {
    pub min_band_fraction: f64,
    pub max_collisions: usize,
    pub allow_target_loss: bool,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds { min_band_fraction: 0.90, max_collisions: 0, allow_target_loss: false }
    }
}

/// Weights that scalarize the three metric families into one cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Objective {
    pub w_dist: f64,
    pub w_coll: f64,
    pub w_loss: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Objective { w_dist: 1.0, w_coll: 10.0, w_loss: 50.0 }
    }
}

impl Objective {
    pub fn cost(&self, m: &ScenarioMetrics) -> f64 {
        self.w_dist * m.rms_dist_error
            + self.w_coll * m.collisions as f64
            + if m.target_lost { self.w_loss } else { 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Increase,
    Decrease,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningHint {
    pub param_name: Option<String>,
    pub direction: Direction,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TuningDirective {
    pub hints: Vec<TuningHint>,
}

impl TuningDirective {
    /// The hinted direction for a parameter; the first hint naming it wins.
    pub fn direction_for(&self, name: &str) -> Option<Direction> {
        self.hints.iter().find(|h| h.param_name.as_deref() == Some(name)).map(|h| h.direction)
    }

    pub fn named_params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for h in &self.hints {
            if let Some(n) = h.param_name.as_deref() {
                if !out.contains(&n) {
                    out.push(n);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Approve,
    Reject,
    Adjust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackCategory {
    TooClose,
    TooFar,
    HitObstacle,
    TooSlow,
    TooJerky,
}

impl FeedbackCategory {
    pub const ALL: [FeedbackCategory; 5] = [
        FeedbackCategory::TooClose,
        FeedbackCategory::TooFar,
        FeedbackCategory::HitObstacle,
        FeedbackCategory::TooSlow,
        FeedbackCategory::TooJerky,
    ];

    /// Accepts `TooClose`, `too_close` and `too-close`.
    pub fn parse(text: &str) -> Option<FeedbackCategory> {
        let key: String = text.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        Self::ALL.into_iter().find(|c| format!("{c:?}").to_lowercase() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFeedback {
    pub verdict: Verdict,
    #[serde(default)]
    pub categories: Vec<FeedbackCategory>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError {
    #[error("Adjust feedback needs at least one category")]
    MissingCategory,
    #[error("feedback verdict must be Adjust, got {0:?}")]
    WrongVerdict(Verdict),
}

impl UserFeedback {
    pub fn approve() -> Self {
        UserFeedback { verdict: Verdict::Approve, categories: vec![], notes: String::new() }
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.verdict == Verdict::Adjust && self.categories.is_empty() {
            return Err(FeedbackError::MissingCategory);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub ticks: usize,
    pub band_fraction: f64,
    pub rms_dist_error: f64,
    pub collisions: usize,
    pub target_lost: bool,
}

impl From<&ScenarioResult> for ScenarioMetrics {
    fn from(r: &ScenarioResult) -> Self {
        ScenarioMetrics {
            ticks: r.ticks,
            band_fraction: r.band_fraction,
            rms_dist_error: r.rms_dist_error,
            collisions: r.collisions,
            target_lost: r.target_lost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub metrics: ScenarioMetrics,
    pub cost: f64,
    pub pass: bool,
    pub violations: Vec<String>,
}

/// Results of one policy on a suite. Trajectories are kept in memory only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub params: BTreeMap<String, f64>,
    pub scenarios: Vec<ScenarioOutcome>,
    pub objective: f64,
    pub pass: bool,
    #[serde(skip)]
    pub results: Vec<ScenarioResult>,
}

fn violations(m: &ScenarioMetrics, t: &MetricThresholds) -> Vec<String> {
    let mut out = Vec::new();
    if m.band_fraction < t.min_band_fraction {
        out.push(format!("band_fraction {:.3} < {:.3}", m.band_fraction, t.min_band_fraction));
    }
    if m.collisions > t.max_collisions {
        out.push(format!("collisions {} > {}", m.collisions, t.max_collisions));
    }
    if m.target_lost && !t.allow_target_loss {
        out.push("target lost".to_string());
    }
    out
}

/// Runs every scenario and judges the policy against the thresholds.
pub fn evaluate_suite(
    policy: &Policy,
    suite: &[Scenario],
    thresholds: &MetricThresholds,
    objective: &Objective,
    seed: u64,
) -> TestReport {
    let compiled = CompiledPolicy::new(policy);
    let results: Vec<ScenarioResult> = suite.iter().map(|s| run_compiled(&compiled, s, seed)).collect();
    let scenarios: Vec<ScenarioOutcome> = suite
        .iter()
        .zip(&results)
        .map(|(s, r)| {
            let metrics = ScenarioMetrics::from(r);
            let violations = violations(&metrics, thresholds);
            ScenarioOutcome {
                name: s.name.clone(),
                cost: objective.cost(&metrics),
                pass: violations.is_empty(),
                metrics,
                violations,
            }
        })
        .collect();
    let objective_value =
        if scenarios.is_empty() { 0.0 } else { scenarios.iter().map(|s| s.cost).sum::<f64>() / scenarios.len() as f64 };
    TestReport {
        params: policy.param_values(),
        pass: scenarios.iter().all(|s| s.pass),
        objective: objective_value,
        scenarios,
        results,
    }
}

/// Mean objective over the suite, without building a report.
pub fn suite_objective(policy: &Policy, suite: &[Scenario], objective: &Objective, seed: u64) -> f64 {
    if suite.is_empty() {
        return 0.0;
    }
    let compiled = CompiledPolicy::new(policy);
    suite.iter().map(|s| objective.cost(&ScenarioMetrics::from(&run_compiled(&compiled, s, seed)))).sum::<f64>()
        / suite.len() as f64
}

// Parameter roles inferred from how a policy uses its parameters.

fn params_in<'a>(e: &'a Expr, policy: &Policy, out: &mut Vec<&'a str>) {
    e.for_each_var(&mut |v| {
        if policy.param(v).is_some() && !out.contains(&v) {
            out.push(v);
        }
    });
}

fn push_unique(out: &mut Vec<String>, items: impl IntoIterator<Item = String>) {
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
}

fn name_matches(name: &str, include: &[&str], exclude: &[&str]) -> bool {
    let n = name.to_lowercase();
    include.iter().any(|k| n.contains(k)) && !exclude.iter().any(|k| n.contains(k))
}

const OBSTACLE_SENSORS: [&str; 3] = ["obst_front", "obst_left", "obst_right"];

fn references_obstacle(e: &Expr) -> bool {
    OBSTACLE_SENSORS.iter().any(|s| e.references(s))
}

/// Parameters compared against the target distance in some guard.
pub fn distance_params(policy: &Policy) -> Vec<String> {
    let mut out = Vec::new();
    for rule in &policy.rules {
        for (a, b) in rule.guard.comparisons() {
            if a.references("dist_to_target") || b.references("dist_to_target") {
                let mut found = Vec::new();
                params_in(a, policy, &mut found);
                params_in(b, policy, &mut found);
                push_unique(&mut out, found.into_iter().map(String::from));
            }
        }
    }
    if out.is_empty() {
        push_unique(
            &mut out,
            policy
                .params
                .iter()
                .filter(|p| name_matches(&p.name, &["dist", "follow", "gap"], &["safe", "obst", "avoid", "clear"]))
                .map(|p| p.name.clone()),
        );
    }
    out
}

fn collect_obstacle_terms<'a>(e: &'a Expr, policy: &Policy, out: &mut Vec<&'a str>) {
    match e {
        Expr::Num(_) | Expr::Var(_) => {}
        Expr::Neg(inner) => collect_obstacle_terms(inner, policy, out),
        Expr::Bin(op, a, b) => {
            if matches!(op, BinOp::Mul | BinOp::Div) && references_obstacle(e) {
                params_in(e, policy, out);
            }
            collect_obstacle_terms(a, policy, out);
            collect_obstacle_terms(b, policy, out);
        }
        Expr::Call(func, args) => {
            if *func != Func::Clamp && references_obstacle(e) {
                params_in(e, policy, out);
            }
            args.iter().for_each(|a| collect_obstacle_terms(a, policy, out));
        }
    }
}

/// Parameters that shape obstacle avoidance: thresholds compared with range
/// readings and gains multiplying range-dependent terms.
pub fn avoidance_params(policy: &Policy) -> Vec<String> {
    let mut found: Vec<&str> = Vec::new();
    for rule in &policy.rules {
        for (a, b) in rule.guard.comparisons() {
            if references_obstacle(a) || references_obstacle(b) {
                params_in(a, policy, &mut found);
                params_in(b, policy, &mut found);
            }
        }
        collect_obstacle_terms(&rule.v, policy, &mut found);
        collect_obstacle_terms(&rule.w, policy, &mut found);
    }
    let mut out: Vec<String> = found.into_iter().map(String::from).collect();
    push_unique(
        &mut out,
        policy
            .params
            .iter()
            .filter(|p| name_matches(&p.name, &["avoid", "obst", "safe", "clear"], &[]))
            .map(|p| p.name.clone()),
    );
    out
}

fn collect_speed_caps<'a>(e: &'a Expr, policy: &Policy, out: &mut Vec<&'a str>) {
    match e {
        Expr::Num(_) | Expr::Var(_) => {}
        Expr::Neg(inner) => collect_speed_caps(inner, policy, out),
        Expr::Bin(_, a, b) => {
            collect_speed_caps(a, policy, out);
            collect_speed_caps(b, policy, out);
        }
        Expr::Call(func, args) => {
            match func {
                Func::Clamp => params_in(&args[2], policy, out),
                Func::Min => {
                    for a in args {
                        if let Expr::Var(name) = a {
                            if policy.param(name).is_some() && !out.contains(&name.as_str()) {
                                out.push(name);
                            }
                        }
                    }
                }
                _ => {}
            }
            args.iter().for_each(|a| collect_speed_caps(a, policy, out));
        }
    }
}

/// Parameters capping the commanded linear speed.
pub fn speed_cap_params(policy: &Policy) -> Vec<String> {
    let mut found: Vec<&str> = Vec::new();
    for rule in &policy.rules {
        collect_speed_caps(&rule.v, policy, &mut found);
    }
    let mut out: Vec<String> = found.into_iter().map(String::from).collect();
    push_unique(
        &mut out,
        policy
            .params
            .iter()
            .filter(|p| name_matches(&p.name, &["speed", "vmax", "v_max", "max_v", "cap"], &[]))
            .map(|p| p.name.clone()),
    );
    out
}

fn collect_bearing_gains<'a>(e: &'a Expr, policy: &Policy, out: &mut Vec<&'a str>) {
    match e {
        Expr::Num(_) | Expr::Var(_) => {}
        Expr::Neg(inner) => collect_bearing_gains(inner, policy, out),
        Expr::Bin(op, a, b) => {
            if *op == BinOp::Mul {
                for (gain, other) in [(a, b), (b, a)] {
                    if let Expr::Var(name) = gain.as_ref() {
                        if policy.param(name).is_some()
                            && other.references("bearing_to_target")
                            && !out.contains(&name.as_str())
                        {
                            out.push(name);
                        }
                    }
                }
            }
            collect_bearing_gains(a, policy, out);
            collect_bearing_gains(b, policy, out);
        }
        Expr::Call(_, args) => args.iter().for_each(|a| collect_bearing_gains(a, policy, out)),
    }
}

/// Parameters scaling the heading response.
pub fn angular_gain_params(policy: &Policy) -> Vec<String> {
    let mut found: Vec<&str> = Vec::new();
    for rule in &policy.rules {
        collect_bearing_gains(&rule.w, policy, &mut found);
    }
    let mut out: Vec<String> = found.into_iter().map(String::from).collect();
    push_unique(
        &mut out,
        policy
            .params
            .iter()
            .filter(|p| name_matches(&p.name, &["turn", "ang", "yaw", "heading", "steer"], &[]))
            .map(|p| p.name.clone()),
    );
    out
}

/// Translates operator feedback into parameter hints.
pub fn feedback_to_directive(fb: &UserFeedback, policy: &Policy) -> Result<TuningDirective, FeedbackError> {
    if fb.verdict != Verdict::Adjust {
        return Err(FeedbackError::WrongVerdict(fb.verdict));
    }
    fb.validate()?;
    let mut hints = Vec::new();
    for category in &fb.categories {
        let (params, direction, why) = match category {
            FeedbackCategory::TooClose => {
                (distance_params(policy), Direction::Increase, "operator reports the robot follows too closely")
            }
            FeedbackCategory::TooFar => {
                (distance_params(policy), Direction::Decrease, "operator reports the robot lags too far behind")
            }
            FeedbackCategory::HitObstacle => {
                (avoidance_params(policy), Direction::Increase, "operator reports contact with an obstacle")
            }
            FeedbackCategory::TooSlow => {
                (speed_cap_params(policy), Direction::Increase, "operator reports the robot is too slow")
            }
            FeedbackCategory::TooJerky => {
                (angular_gain_params(policy), Direction::Decrease, "operator reports jerky turning")
            }
        };
        if params.is_empty() {
            hints.extend(policy.params.iter().map(|p| TuningHint {
                param_name: Some(p.name.clone()),
                direction: Direction::Free,
                reason: format!("{category:?}: no parameter matches this category ({why}); all parameters left free"),
            }));
            continue;
        }
        hints.extend(params.into_iter().map(|name| TuningHint {
            param_name: Some(name),
            direction,
            reason: format!("{category:?}: {why}"),
        }));
        if *category == FeedbackCategory::HitObstacle {
            hints.push(TuningHint {
                param_name: None,
                direction: Direction::Free,
                reason: "HitObstacle: emphasize the collision penalty (w_coll) when judging candidates".into(),
            });
        }
    }
    Ok(TuningDirective { hints })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningBudget {
    pub rounds: usize,
    pub evals_per_round: usize,
}

impl Default for TuningBudget {
    fn default() -> Self {
        TuningBudget { rounds: 6, evals_per_round: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub params: BTreeMap<String, f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub policy: Policy,
    /// Starting point followed by every accepted improvement.
    pub history: Vec<HistoryEntry>,
    pub evaluations: usize,
}

impl TuningOutcome {
    pub fn best_objective(&self) -> f64 {
        self.history.last().map(|h| h.objective).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuneError {
    #[error("policy has no tunable parameters")]
    NoParams,
    #[error("tuning budget needs at least one round and one evaluation per round")]
    EmptyBudget,
}

/// Initial probe step as a fraction of each parameter's range.
pub const INITIAL_STEP_FRACTION: f64 = 0.25;

/// Bounded coordinate descent over the policy's parameters.
///
/// Round `r` probes each parameter at `value ± step·(hi − lo)` with the step
/// fraction starting at 0.25 and halving every round. An improving probe is
/// accepted and the search keeps stepping from the new value until neither
/// direction improves. Parameters named by the directive go first and only
/// move in their hinted direction. `cost` is called at most
/// `rounds · evals_per_round` times, including the initial evaluation.
pub fn tune_with<F>(
    policy: &Policy,
    directive: Option<&TuningDirective>,
    budget: TuningBudget,
    mut cost: F,
) -> Result<TuningOutcome, TuneError>
where
    F: FnMut(&Policy) -> f64,
{
    if policy.params.is_empty() {
        return Err(TuneError::NoParams);
    }
    if budget.rounds == 0 || budget.evals_per_round == 0 {
        return Err(TuneError::EmptyBudget);
    }

    let mut order: Vec<String> = Vec::new();
    if let Some(d) = directive {
        for name in d.named_params() {
            if policy.param(name).is_some() {
                order.push(name.to_string());
            }
        }
    }
    for p in &policy.params {
        if !order.contains(&p.name) {
            order.push(p.name.clone());
        }
    }

    let mut best = policy.clone();
    let mut best_cost = cost(&best);
    let mut evaluations = 1;
    let mut history = vec![HistoryEntry { round: 0, params: best.param_values(), objective: best_cost }];

    for round in 1..=budget.rounds {
        let fraction = INITIAL_STEP_FRACTION / 2f64.powi(round as i32 - 1);
        let mut round_evals = if round == 1 { 1 } else { 0 };
        'params: for name in &order {
            let signs: Vec<f64> = match directive.and_then(|d| d.direction_for(name)) {
                Some(Direction::Increase) => vec![1.0],
                Some(Direction::Decrease) => vec![-1.0],
                Some(Direction::Free) | None => vec![1.0, -1.0],
            };
            let mut signs = signs;
            loop {
                let mut improved = false;
                for i in 0..signs.len() {
                    let sign = signs[i];
                    let param = best.param(name).expect("ordered names exist");
                    let step = fraction * (param.hi - param.lo);
                    let candidate_value = (param.value + sign * step).clamp(param.lo, param.hi);
                    if candidate_value == param.value {
                        continue;
                    }
                    if round_evals >= budget.evals_per_round {
                        break 'params;
                    }
                    let mut candidate = best.clone();
                    candidate.params.iter_mut().find(|p| &p.name == name).expect("exists").value = candidate_value;
                    let c = cost(&candidate);
                    round_evals += 1;
                    evaluations += 1;
                    if c < best_cost {
                        best = candidate;
                        best_cost = c;
                        history.push(HistoryEntry { round, params: best.param_values(), objective: c });
                        improved = true;
                        // keep moving the way that just worked
                        signs.swap(0, i);
                        break;
                    }
                }
                if !improved {
                    break;
                }
            }
        }
    }

    Ok(TuningOutcome { policy: best, history, evaluations })
}

/// Tunes a policy against the suite objective.
pub fn tune(
    policy: &Policy,
    suite: &[Scenario],
    objective: &Objective,
    directive: Option<&TuningDirective>,
    budget: TuningBudget,
    seed: u64,
) -> Result<TuningOutcome, TuneError> {
    tune_with(policy, directive, budget, |p| suite_objective(p, suite, objective, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustedDirection {
    pub param_name: String,
    pub direction: Direction,
}

/// What the analyst needs to re-plan after the tester gives up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationReport {
    pub worst_scenario: String,
    pub worst_objective: f64,
    pub worst_metrics: ScenarioMetrics,
    pub violated_thresholds: Vec<String>,
    pub parameter_history: Vec<BTreeMap<String, f64>>,
    pub exhausted_directions: Vec<ExhaustedDirection>,
    pub failing_reports: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("nothing to escalate: every report passes")]
pub struct NothingToEscalate;

/// Summarizes failing test reports for the analyst.
pub fn compose_escalation(
    reports: &[TestReport],
    directives: &[TuningDirective],
) -> Result<EscalationReport, NothingToEscalate> {
    let failing: Vec<&TestReport> = reports.iter().filter(|r| !r.pass).collect();
    let worst = failing
        .iter()
        .copied()
        .reduce(|a, b| if b.objective > a.objective { b } else { a })
        .ok_or(NothingToEscalate)?;
    let scenario = worst
        .scenarios
        .iter()
        .filter(|s| !s.pass)
        .reduce(|a, b| if b.cost > a.cost { b } else { a })
        .expect("a failing report has a failing scenario");

    let violated_thresholds =
        worst.scenarios.iter().flat_map(|s| s.violations.iter().map(move |v| format!("{}: {v}", s.name))).collect();

    let mut exhausted: Vec<ExhaustedDirection> = Vec::new();
    for d in directives {
        for h in &d.hints {
            if let Some(name) = &h.param_name {
                let e = ExhaustedDirection { param_name: name.clone(), direction: h.direction };
                if !exhausted.contains(&e) {
                    exhausted.push(e);
                }
            }
        }
    }

    Ok(EscalationReport {
        worst_scenario: scenario.name.clone(),
        worst_objective: worst.objective,
        worst_metrics: scenario.metrics,
        violated_thresholds,
        parameter_history: reports.iter().map(|r| r.params.clone()).collect(),
        exhausted_directions: exhausted,
        failing_reports: failing.len(),
    })
}
