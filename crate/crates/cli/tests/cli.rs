use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

fn crewforge(sessions: &Path, args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_crewforge"))
        .arg("--sessions-dir")
        .arg(sessions)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_args<'a>(spec: &'a str, config: &'a str, script: &'a str) -> Vec<&'a str> {
    vec!["run", spec, "--config", config, "--script", script, "--seed", "7"]
}

fn paths(config: &str, script: &str) -> (String, String, String) {
    let s = |p: PathBuf| p.display().to_string();
    (
        s(asset("specs/quadruped_follow.toml")),
        s(asset(&format!("config/{config}.toml"))),
        s(asset(&format!("scripts/{script}.toml"))),
    )
}

#[test]
fn suite_lists_the_builtin_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let o = crewforge(dir.path(), &["suite"], "");
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["straight_walk", "l_shaped_walk", "corridor", "speed_burst"] {
        assert!(text.contains(name), "{text}");
    }
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn simulate_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let policy = asset("policies/follow.policy").display().to_string();
    let csv = dir.path().join("traj.csv");
    let o = crewforge(dir.path(), &["simulate", &policy, "corridor", "--trajectory", csv.to_str().unwrap()], "");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let band: f64 = text.lines().find_map(|l| l.strip_prefix("band_fraction ")).unwrap().parse().unwrap();
    assert!(band >= 0.9, "{text}");
    assert!(text.contains("collisions 0"));
    let rows = std::fs::read_to_string(csv).unwrap();
    assert!(rows.starts_with("t,x,y,theta,tx,ty,dist"));
    assert_eq!(rows.lines().count(), 1201);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(crewforge(dir.path(), &["bogus"], "").status.code(), Some(2));
    assert_eq!(crewforge(dir.path(), &["simulate", "missing.policy", "corridor"], "").status.code(), Some(2));
    assert_eq!(crewforge(dir.path(), &["replay", "no-such-session"], "").status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "k_adjust = 0\n").unwrap();
    let (spec, _, script) = paths("default", "happy_path");
    let o = crewforge(dir.path(), &run_args(&spec, bad.to_str().unwrap(), &script), "");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k_adjust"));

    assert_eq!(crewforge(dir.path(), &["--help"], "").status.code(), Some(0));
}

#[test]
fn scripted_run_is_accepted_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, config, script) = paths("default", "happy_path");
    let o = crewforge(dir.path(), &run_args(&spec, &config, &script), "");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("finished: Accepted"), "{text}");
    assert!(text.contains("accepted policy:"));

    let id = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().file_name();
    let id = id.to_str().unwrap();
    for file in ["session.json", "transcript.ndjson", "calls.ndjson", "reports/accepted.policy"] {
        assert!(dir.path().join(id).join(file).exists(), "{file}");
    }
    let o = crewforge(dir.path(), &["replay", id], "");
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("transcript identical (17 messages, phase Accepted)"), "{}", stdout(&o));
}

#[test]
fn exhausted_escalation_exits_with_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, config, script) = paths("escalation", "escalation");
    let o = crewforge(dir.path(), &run_args(&spec, &config, &script), "");
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("finished: Failed"));
}

#[test]
fn operator_feedback_is_read_from_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, config, script) = paths("default", "happy_path");
    let text = std::fs::read_to_string(&script).unwrap();
    let no_feedback = &text[..text.find("[[feedback]]").unwrap()];
    let script = dir.path().join("no_feedback.toml");
    std::fs::write(&script, no_feedback).unwrap();
    let sessions = dir.path().join("sessions");

    let o =
        crewforge(&sessions, &run_args(&spec, &config, script.to_str().unwrap()), "maybe\nadjust too_close\napprove\n");
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(0), "{err}");
    assert!(err.contains("feedback> "));
    assert!(err.contains("unknown verdict"), "{err}");
    assert!(stdout(&o).contains("UserFeedback"));
    assert!(stdout(&o).contains("finished: Accepted"));

    // input ends before the operator decides
    let o = crewforge(&sessions, &run_args(&spec, &config, script.to_str().unwrap()), "");
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("no operator feedback available"));
}
