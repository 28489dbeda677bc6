//! Subcommands of the `crewforge` binary.

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crewforge::backend::ScriptFile;
use crewforge::orchestrator::{
    start_session, step, BackendBinding, BackendKind, Deps, Phase, SessionConfig, SessionRecord, SessionStore,
    StepError,
};
use crewforge::policy::{parse, Policy};
use crewforge::roles::{Payload, TaskSpec};
use crewforge::simulator::{run_scenario, Scenario};
use crewforge::tester::ScenarioMetrics;

use crate::feedback::{stdin_lines, TerminalFeedback};
use crate::view::transcript_line;

/// Marks errors caused by bad arguments or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "crewforge",
    version,
    about = "Analyst, programmer and tester models developing a robot following policy"
)]
pub struct Cli {
    /// Directory holding one subdirectory per session.
    #[arg(long, global = true, default_value = "sessions")]
    pub sessions_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a session from a task spec, prompting for feedback at review.
    Run(RunArgs),
    /// Re-drive a stored session from its recorded replies and compare transcripts.
    Replay { session_id: String },
    /// Run one policy through one scenario and print its metrics.
    Simulate(SimulateArgs),
    /// List the configured scenarios.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the HTTP API (and the console, if built).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Scripted,
    Http,
}

impl From<BackendChoice> for BackendKind {
    fn from(c: BackendChoice) -> Self {
        match c {
            BackendChoice::Scripted => BackendKind::Scripted,
            BackendChoice::Http => BackendKind::Http,
        }
    }
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    /// Session config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this backend for every role, overriding the config binding.
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Replies (and optional feedback) for scripted roles.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Step continuously, pausing only for operator feedback (default).
    #[arg(long, conflicts_with = "manual")]
    pub auto: bool,
    /// Wait for an explicit request before every step.
    #[arg(long)]
    pub manual: bool,
}

impl SessionArgs {
    pub fn load_config(&self) -> Result<SessionConfig> {
        let mut config = match &self.config {
            Some(path) => SessionConfig::load(path).map_err(|e| usage(e.to_string()))?,
            None => SessionConfig::default(),
        };
        if let Some(b) = self.backend {
            config.backend.binding = BackendBinding::all(b.into());
        }
        Ok(config)
    }

    pub fn load_script(&self) -> Result<Option<ScriptFile>> {
        self.script
            .as_deref()
            .map(|p| ScriptFile::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
            .transpose()
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Task spec (TOML).
    pub spec: PathBuf,
    #[command(flatten)]
    pub session: SessionArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Policy source file.
    pub policy: PathBuf,
    /// Scenario name from the suite, or a scenario file.
    pub scenario: String,
    /// Config whose scenario suite is searched.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task spec whose robot limits replace the scenario's.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the trajectory as CSV to this file.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 7340)]
    pub port: u16,
    /// Built console assets to serve at `/`.
    #[arg(long)]
    pub console_dir: Option<PathBuf>,
}

/// How a command ended, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failed,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Failed => 1,
        }
    }
}

pub fn load_spec(path: &Path) -> Result<TaskSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    TaskSpec::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn run(args: &RunArgs, sessions_dir: &Path, out: &mut dyn Write) -> Result<Outcome> {
    let spec = load_spec(&args.spec)?;
    let config = args.session.load_config()?;
    let script = args.session.load_script()?;
    let mut deps = Deps::from_config(&config, &spec, script.as_ref()).map_err(|e| usage(e.to_string()))?;
    let scripted_feedback = script.as_ref().map(|s| s.feedback.clone()).unwrap_or_default();
    deps.feedback = Some(Box::new(TerminalFeedback::new(scripted_feedback, stdin_lines(), io::stderr())));

    let mut state = start_session(spec, config, args.session.seed).map_err(|e| usage(e.to_string()))?;
    let store = SessionStore::new(sessions_dir);
    let mut writer = store.create(&SessionRecord::of(&state, script))?;
    writeln!(out, "session {}", state.session_id)?;
    let mut printed = 0;
    let mut flush = |state: &crewforge::orchestrator::SessionState, out: &mut dyn Write| -> Result<()> {
        for m in &state.transcript[printed..] {
            writeln!(out, "{}", transcript_line(m))?;
        }
        printed = state.transcript.len();
        Ok(())
    };
    flush(&state, out)?;
    writer.sync(&state.transcript, deps.backends.calls())?;

    while !state.phase.is_terminal() {
        if args.session.manual {
            eprint!("[{}] press Enter to step> ", state.phase);
            let mut line = String::new();
            if io::stdin().read_line(&mut line)? == 0 {
                break;
            }
        }
        let result = step(&mut state, &mut deps);
        writer.sync(&state.transcript, deps.backends.calls())?;
        flush(&state, out)?;
        match result {
            Ok(_) => {}
            Err(StepError::AwaitingFeedback) => {
                writeln!(out, "no operator feedback available; session left in {}", state.phase)?;
                return Ok(Outcome::Failed);
            }
            Err(StepError::InvalidFeedback(e)) => return Err(usage(format!("invalid scripted feedback: {e}"))),
            Err(e) => return Err(e.into()),
        }
    }

    writeln!(out, "session {} finished: {}", state.session_id, state.phase)?;
    writeln!(out, "stored in {}", writer.dir().display())?;
    if let Some(Payload::Acceptance(acc)) = state.transcript.last().map(|m| &m.payload) {
        writeln!(out, "\naccepted policy:\n{}", acc.accepted_policy)?;
        for s in &acc.final_report.scenarios {
            writeln!(out, "{}", metrics_line(&s.name, &s.metrics))?;
        }
    }
    Ok(if state.phase == Phase::Accepted { Outcome::Success } else { Outcome::Failed })
}

fn metrics_line(name: &str, m: &ScenarioMetrics) -> String {
    format!(
        "{name:<14} band_fraction {:.4}  rms_dist_error {:.4}  collisions {}  target_lost {}",
        m.band_fraction, m.rms_dist_error, m.collisions, m.target_lost
    )
}

pub fn replay(session_id: &str, sessions_dir: &Path, out: &mut dyn Write) -> Result<Outcome> {
    let store = SessionStore::new(sessions_dir);
    if !store.dir(session_id).join("session.json").exists() {
        return Err(usage(format!("no session {session_id} under {}", sessions_dir.display())));
    }
    let outcome = store.replay(session_id)?;
    if outcome.identical {
        writeln!(out, "transcript identical ({} messages, phase {})", outcome.stored_len, outcome.phase)?;
        Ok(Outcome::Success)
    } else {
        writeln!(
            out,
            "transcript differs at message {} (stored {} messages, replayed {})",
            outcome.first_difference.unwrap_or(0),
            outcome.stored_len,
            outcome.replayed_len
        )?;
        Ok(Outcome::Failed)
    }
}

fn suite_for(config: Option<&Path>, spec: Option<&Path>) -> Result<Vec<Scenario>> {
    let config = match config {
        Some(p) => SessionConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => SessionConfig::default(),
    };
    let suite = match spec {
        Some(p) => config.load_suite(&load_spec(p)?),
        None => config.load_scenarios(),
    };
    suite.map_err(|e| usage(e.to_string()))
}

pub fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<Outcome> {
    let source = std::fs::read_to_string(&args.policy).map_err(|e| usage(format!("{}: {e}", args.policy.display())))?;
    let policy: Policy = parse(&source).map_err(|e| usage(format!("{}: {e}", args.policy.display())))?;
    policy.validate().map_err(|e| usage(format!("{}: {e}", args.policy.display())))?;

    let scenario = if Path::new(&args.scenario).is_file() {
        let mut s = Scenario::load(Path::new(&args.scenario)).map_err(|e| usage(e.to_string()))?;
        if let Some(spec) = &args.spec {
            let r = load_spec(spec)?.robot_params;
            let limits = crewforge::simulator::RobotLimits {
                radius: r.robot_radius,
                v_max: r.max_linear_speed,
                w_max: r.max_angular_speed,
            };
            s = s.with_robot(limits, r.sensor_range);
        }
        s
    } else {
        let suite = suite_for(args.config.as_deref(), args.spec.as_deref())?;
        crewforge::simulator::find_scenario(&suite, &args.scenario).map_err(|e| usage(e.to_string()))?
    };

    let result = run_scenario(&policy, &scenario, args.seed);
    writeln!(out, "scenario {} ({} ticks, dt {})", scenario.name, result.ticks, scenario.dt)?;
    writeln!(out, "band_fraction {:.4}", result.band_fraction)?;
    writeln!(out, "rms_dist_error {:.4}", result.rms_dist_error)?;
    writeln!(out, "collisions {}", result.collisions)?;
    writeln!(out, "target_lost {}", result.target_lost)?;
    if let Some(path) = &args.trajectory {
        std::fs::write(path, result.trajectory_csv()).with_context(|| format!("writing {}", path.display()))?;
        writeln!(out, "trajectory written to {}", path.display())?;
    }
    Ok(Outcome::Success)
}

pub fn suite(config: Option<&Path>, out: &mut dyn Write) -> Result<Outcome> {
    for s in suite_for(config, None)? {
        writeln!(
            out,
            "{:<14} {:>5.1} s  {} waypoints  {} obstacles  desired {} m +- {}",
            s.name,
            s.duration_s,
            s.target_path.len(),
            s.obstacles.len(),
            s.desired_follow_dist,
            s.band_tolerance
        )?;
    }
    Ok(Outcome::Success)
}
