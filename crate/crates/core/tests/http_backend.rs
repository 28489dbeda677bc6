use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crewforge::backend::{BackendError, ChatBackend, ChatRequest, HttpBackend, HttpConfig};

enum Canned {
    Reply(u16, &'static str),
    Stall(Duration),
}

struct Captured {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one canned answer per connection, in accept order, and records
/// requests.
fn serve(answers: Vec<Canned>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for answer in answers {
            let Ok((stream, _)) = listener.accept() else { return };
            let log = Arc::clone(&log);
            thread::spawn(move || answer_one(stream, answer, &log));
        }
    });
    (url, seen)
}

fn answer_one(stream: TcpStream, answer: Canned, log: &Mutex<Vec<Captured>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = Vec::new();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
        headers.push(line);
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    log.lock().unwrap().push(Captured { headers, body: serde_json::from_slice(&body).unwrap() });
    let mut stream = stream;
    match answer {
        Canned::Reply(status, text) => {
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
        Canned::Stall(d) => thread::sleep(d),
    }
}

const OK: &str = r#"{"choices": [{"message": {"role": "assistant", "content": "hello"}}], "usage": {"prompt_tokens": 7, "completion_tokens": 2}}"#;

fn backend(url: &str, max_retries: u32, timeout_ms: u64) -> HttpBackend {
    let config =
        HttpConfig { base_url: url.into(), model: "test-model".into(), timeout_ms, max_retries, backoff_ms: 10 };
    HttpBackend::with_key(config, Some("secret".into()))
}

fn request() -> ChatRequest {
    ChatRequest::single("system text", "user text", 64, 0.0)
}

#[test]
fn sends_chat_completion_and_decodes_reply() {
    let (url, seen) = serve(vec![Canned::Reply(200, OK)]);
    let mut b = backend(&url, 0, 2000);
    let r = b.complete(&request()).unwrap();
    assert_eq!(r.content, "hello");
    assert_eq!((r.usage.prompt_units, r.usage.completion_units), (7, 2));
    assert_eq!(b.last_attempts(), 1);

    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert!(req.headers[0].starts_with("POST /chat/completions"), "{:?}", req.headers[0]);
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: bearer secret")));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["max_tokens"], 64);
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][1]["role"], "user");
    assert_eq!(req.body["messages"][1]["content"], "user text");
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![Canned::Reply(503, "{}"), Canned::Reply(500, "{}"), Canned::Reply(200, OK)]);
    let mut b = backend(&url, 2, 2000);
    assert_eq!(b.complete(&request()).unwrap().content, "hello");
    assert_eq!(b.last_attempts(), 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_stop_at_the_limit() {
    let (url, _) = serve(vec![Canned::Reply(502, "{}"), Canned::Reply(502, "{}")]);
    let mut b = backend(&url, 1, 2000);
    assert_eq!(b.complete(&request()), Err(BackendError::HttpStatus(502)));
    assert_eq!(b.last_attempts(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    for status in [400, 401, 429] {
        let (url, seen) = serve(vec![Canned::Reply(status, "{}"), Canned::Reply(200, OK)]);
        let mut b = backend(&url, 3, 2000);
        assert_eq!(b.complete(&request()), Err(BackendError::HttpStatus(status)));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }
}

#[test]
fn timeouts_are_reported_and_retried() {
    let (url, seen) = serve(vec![Canned::Stall(Duration::from_millis(600)), Canned::Reply(200, OK)]);
    let mut b = backend(&url, 1, 150);
    assert_eq!(b.complete(&request()).unwrap().content, "hello");
    assert_eq!(b.last_attempts(), 2);
    assert_eq!(seen.lock().unwrap().len(), 2);

    let (url, _) = serve(vec![Canned::Stall(Duration::from_millis(600))]);
    let mut b = backend(&url, 0, 150);
    assert_eq!(b.complete(&request()), Err(BackendError::HttpTimeout));
}

#[test]
fn malformed_bodies_are_rejected() {
    let (url, _) = serve(vec![Canned::Reply(200, "not json")]);
    let mut b = backend(&url, 2, 2000);
    assert!(matches!(b.complete(&request()), Err(BackendError::MalformedResponse(_))));
    assert_eq!(b.last_attempts(), 1);
}
