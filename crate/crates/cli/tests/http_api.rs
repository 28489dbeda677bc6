use std::path::PathBuf;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use crewforge::backend::ScriptFile;
use crewforge::orchestrator::{normalize_transcript, SessionConfig};
use crewforge::roles::{Message, Payload, TaskSpec};
use crewforge_cli::server::{router, AppState, Created, ErrorBody, Mode, ServerOptions, TrajectoryView};
use crewforge_cli::view::ApiSessionView;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn asset(rel: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn spec_json() -> Value {
    serde_json::to_value(TaskSpec::from_toml(&asset("specs/quadruped_follow.toml")).unwrap()).unwrap()
}

struct Api {
    app: Router,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new(mode: Mode) -> Api {
        let dir = tempfile::tempdir().unwrap();
        let options = ServerOptions {
            config: SessionConfig::from_toml(&asset("config/default.toml")).unwrap(),
            script: Some(ScriptFile::from_toml(&asset("scripts/happy_path.toml")).unwrap()),
            mode,
            sessions_dir: dir.path().to_path_buf(),
            console_dir: None,
        };
        Api { app: router(AppState::new(options)), _dir: dir }
    }

    async fn call(&self, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, Body::from))
            .unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, uri: &str) -> T {
        let (status, body) = self.call(Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
        serde_json::from_slice(&body).unwrap()
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
        self.call(Method::POST, uri, Some(body.to_string())).await
    }

    async fn create(&self, body: Value) -> String {
        let (status, bytes) = self.post("/sessions", body).await;
        assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
        serde_json::from_slice::<Created>(&bytes).unwrap().session_id
    }

    async fn view(&self, id: &str) -> ApiSessionView {
        self.get(&format!("/sessions/{id}")).await
    }

    /// Polls until the view satisfies `done`.
    async fn wait_for(&self, id: &str, done: impl Fn(&ApiSessionView) -> bool) -> ApiSessionView {
        let started = Instant::now();
        loop {
            let v = self.view(id).await;
            if done(&v) {
                return v;
            }
            assert!(started.elapsed() < Duration::from_secs(60), "stuck in {}", v.phase);
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

fn error_of(body: &[u8]) -> ErrorBody {
    serde_json::from_slice(body).unwrap_or_else(|_| panic!("not an error body: {}", String::from_utf8_lossy(body)))
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_unknown_sessions() {
    let api = Api::new(Mode::Manual);
    assert_eq!(api.call(Method::GET, "/healthz", None).await.0, StatusCode::OK);
    for (method, uri) in [
        (Method::GET, "/sessions/nope"),
        (Method::GET, "/sessions/nope/transcript?since_seq=0&timeout_ms=10"),
        (Method::POST, "/sessions/nope/advance"),
        (Method::GET, "/sessions/nope/trajectory/corridor"),
    ] {
        assert_eq!(api.call(method, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = api.post("/sessions/nope/feedback", json!({"verdict": "Approve"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(api.get::<Vec<ApiSessionView>>("/sessions").await, vec![]);
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_creation_requests_name_the_field() {
    let api = Api::new(Mode::Manual);
    let mut spec = spec_json();
    spec["robot_params"]["max_linear_speed"] = json!(-1.0);
    let (status, body) = api.post("/sessions", json!({"spec": spec})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_of(&body).field.as_deref(), Some("spec.robot_params.max_linear_speed"));

    let cases = [
        (json!({"spec": spec_json(), "config": {"k_adjust": "three"}}), Some("config.k_adjust")),
        (json!({"spec": spec_json(), "config": {"k_adjust": 0}}), Some("config.k_adjust")),
        (json!({"spec": spec_json(), "config": {"tuning": {"speed": 1}}}), Some("config.tuning")),
        (json!({"spec": {"robot_params": spec_json()["robot_params"]}}), Some("spec")),
        (json!({"spec": spec_json(), "colour": 1}), None),
    ];
    for (body, field) in cases {
        let (status, bytes) = api.post("/sessions", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let err = error_of(&bytes);
        assert!(!err.error.is_empty());
        if let Some(f) = field {
            assert!(err.field.as_deref().is_some_and(|got| got.starts_with(f)), "{body}: {err:?}");
        }
    }

    let (status, bytes) = api.call(Method::POST, "/sessions", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    error_of(&bytes);
}

#[tokio::test(flavor = "multi_thread")]
async fn manual_sessions_step_only_on_request() {
    let api = Api::new(Mode::Manual);
    let id = api.create(json!({"spec": spec_json(), "seed": 7})).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    let v = api.view(&id).await;
    assert_eq!((v.phase.to_string().as_str(), v.transcript_len), ("Intake", 1));
    let (status, _) = api.call(Method::GET, &format!("/sessions/{id}/trajectory/corridor"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let mut phases = vec![];
    while phases.last().map(String::as_str) != Some("CodeGen") {
        let (status, body) = api.call(Method::POST, &format!("/sessions/{id}/advance"), None).await;
        assert_eq!(status, StatusCode::OK);
        phases.push(serde_json::from_slice::<ApiSessionView>(&body).unwrap().phase.to_string());
    }
    assert_eq!(phases, ["Analysis", "PlanValidation", "CodeGen"]);

    let (status, body) = api.post(&format!("/sessions/{id}/feedback"), json!({"verdict": "Approve"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(error_of(&body).error.contains("UserReview"));
    assert_eq!(api.view(&id).await.phase.to_string(), "CodeGen");
}

#[tokio::test(flavor = "multi_thread")]
async fn transcript_long_poll_times_out_empty() {
    let api = Api::new(Mode::Manual);
    let id = api.create(json!({"spec": spec_json()})).await;
    let all: Vec<Message> = api.get(&format!("/sessions/{id}/transcript")).await;
    let last = all.last().unwrap().seq;

    let started = Instant::now();
    let page: Vec<Message> = api.get(&format!("/sessions/{id}/transcript?since_seq={last}&timeout_ms=300")).await;
    assert!(page.is_empty());
    assert!(started.elapsed() >= Duration::from_millis(300));

    // a waiting poll wakes when a step lands
    let poll = {
        let app = api.app.clone();
        let uri = format!("/sessions/{id}/transcript?since_seq={last}&timeout_ms=20000");
        tokio::spawn(async move {
            let res = app.oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
            let bytes = res.into_body().collect().await.unwrap().to_bytes();
            serde_json::from_slice::<Vec<Message>>(&bytes).unwrap()
        })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    let started = Instant::now();
    api.call(Method::POST, &format!("/sessions/{id}/advance"), None).await;
    let page = poll.await.unwrap();
    assert!(started.elapsed() < Duration::from_secs(5));
    assert_eq!(page.first().map(|m| m.seq), Some(last + 1));
}

/// Runs the happy path in auto mode with feedback posted over HTTP while a
/// poller follows the transcript page by page.
#[tokio::test(flavor = "multi_thread")]
async fn auto_session_reaches_acceptance_through_feedback() {
    let api = Api::new(Mode::Auto);
    let id = api.create(json!({"spec": spec_json(), "seed": 7})).await;

    let poller = {
        let app = api.app.clone();
        let id = id.clone();
        tokio::spawn(async move {
            let mut pages: Vec<Vec<Message>> = vec![];
            let mut since: Option<u64> = None;
            loop {
                let uri = match since {
                    Some(n) => format!("/sessions/{id}/transcript?since_seq={n}&timeout_ms=2000"),
                    None => format!("/sessions/{id}/transcript"),
                };
                let res = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
                let page: Vec<Message> =
                    serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
                let done = page.iter().any(|m| matches!(m.payload, Payload::Acceptance(_) | Payload::Failure(_)));
                if let Some(m) = page.last() {
                    since = Some(m.seq);
                }
                pages.push(page);
                if done {
                    return pages;
                }
            }
        })
    };

    let review = api.wait_for(&id, |v| v.awaiting_feedback).await;
    assert_eq!(review.phase.to_string(), "UserReview");
    assert!(review.metrics.as_ref().is_some_and(|m| m.pass));
    let adjust =
        json!({"verdict": "Adjust", "categories": ["TooClose"], "notes": "a bit too close when the person stops"});
    assert_eq!(api.post(&format!("/sessions/{id}/feedback"), adjust.clone()).await.0, StatusCode::NO_CONTENT);
    let (status, _) = api.post(&format!("/sessions/{id}/feedback"), adjust).await;
    assert_eq!(status, StatusCode::CONFLICT, "a second submission before the step is rejected");

    api.wait_for(&id, |v| v.awaiting_feedback && v.counters.reviews_used == 1).await;
    let bad = json!({"verdict": "Adjust", "categories": []});
    assert_eq!(api.post(&format!("/sessions/{id}/feedback"), bad).await.0, StatusCode::BAD_REQUEST);
    let approve = json!({"verdict": "Approve", "notes": "looks good"});
    assert_eq!(api.post(&format!("/sessions/{id}/feedback"), approve).await.0, StatusCode::NO_CONTENT);
    let done = api.wait_for(&id, |v| v.phase.is_terminal()).await;
    assert_eq!(done.phase.to_string(), "Accepted");

    let full: Vec<Message> = api.get(&format!("/sessions/{id}/transcript")).await;
    let pages = poller.await.unwrap();
    assert!(pages.len() > 2, "the poller saw the session progress");
    let joined: Vec<Message> = pages.into_iter().flatten().collect();
    assert_eq!(serde_json::to_value(&joined).unwrap(), serde_json::to_value(&full).unwrap());
    for (i, m) in full.iter().enumerate() {
        assert_eq!(m.seq, i as u64);
    }
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/happy_path.ndjson");
    assert_eq!(normalize_transcript(&full), std::fs::read_to_string(golden).unwrap());

    // a terminal session reads back identically
    let (_, a) = api.call(Method::GET, &format!("/sessions/{id}"), None).await;
    let (_, b) = api.call(Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(a, b);
    let (_, a) = api.call(Method::GET, &format!("/sessions/{id}/transcript"), None).await;
    let (_, b) = api.call(Method::GET, &format!("/sessions/{id}/transcript"), None).await;
    assert_eq!(a, b);
    let views: Vec<ApiSessionView> = api.get("/sessions").await;
    assert_eq!(views, vec![done.clone()]);
    assert_eq!(api.call(Method::POST, &format!("/sessions/{id}/advance"), None).await.0, StatusCode::OK);

    let t: TrajectoryView = api.get(&format!("/sessions/{id}/trajectory/corridor")).await;
    assert_eq!(t.trajectory.len(), t.metrics.ticks);
    let reported = done.metrics.unwrap().scenarios.into_iter().find(|s| s.name == "corridor").unwrap();
    assert_eq!(t.metrics, reported.metrics);
    assert_eq!(Some(t.policy), done.policy);
    let (status, _) = api.call(Method::GET, &format!("/sessions/{id}/trajectory/moon_walk"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Many clients racing advance and feedback leave a gapless transcript.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_keep_the_transcript_consistent() {
    let api = Api::new(Mode::Manual);
    let id = api.create(json!({"spec": spec_json(), "seed": 3})).await;
    let mut workers = vec![];
    for w in 0..6usize {
        let app = api.app.clone();
        let id = id.clone();
        workers.push(tokio::spawn(async move {
            let mut statuses = vec![];
            for i in 0..40usize {
                let req = match (w + i) % 3 {
                    0 => Request::post(format!("/sessions/{id}/feedback"))
                        .body(Body::from(r#"{"verdict": "Adjust", "categories": ["TooFar"]}"#))
                        .unwrap(),
                    1 => Request::post(format!("/sessions/{id}/feedback"))
                        .body(Body::from(r#"{"verdict": "Approve"}"#))
                        .unwrap(),
                    _ => Request::post(format!("/sessions/{id}/advance")).body(Body::empty()).unwrap(),
                };
                statuses.push(app.clone().oneshot(req).await.unwrap().status());
            }
            statuses
        }));
    }
    for w in workers {
        for s in w.await.unwrap() {
            assert!(matches!(s, StatusCode::OK | StatusCode::NO_CONTENT | StatusCode::CONFLICT), "{s}");
        }
    }

    // finish deterministically
    let started = Instant::now();
    while !api.view(&id).await.phase.is_terminal() {
        assert!(started.elapsed() < Duration::from_secs(60));
        let v = api.view(&id).await;
        if v.awaiting_feedback {
            api.post(&format!("/sessions/{id}/feedback"), json!({"verdict": "Approve"})).await;
        } else {
            api.call(Method::POST, &format!("/sessions/{id}/advance"), None).await;
        }
    }
    let full: Vec<Message> = api.get(&format!("/sessions/{id}/transcript")).await;
    for (i, m) in full.iter().enumerate() {
        assert_eq!(m.seq, i as u64);
    }
    let last = full.last().unwrap();
    assert!(matches!(last.payload, Payload::Acceptance(_) | Payload::Failure(_)));
    let feedback = full.iter().filter(|m| matches!(m.payload, Payload::UserFeedback(_))).count();
    let reviews = full.iter().filter(|m| m.phase.to_string() == "UserReview").count();
    assert!(feedback <= reviews);
}
