use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use coach_core::llm::{
    complete, moderate, moderate_fail_closed, ChatHistory, LlmBackend, LlmError, RemoteBackend, RemoteConfig,
};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Minimal HTTP/1.1 responder: `handler(path, body) -> (status, body, delay)`.
fn mock<F>(handler: F) -> (String, Arc<Mutex<Vec<Seen>>>)
where
    F: Fn(&str, &Value) -> (u16, String, Duration) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, reply, delay) = handler(&path, &body);
            log.lock().unwrap().push(Seen { path, auth, body });
            thread::sleep(delay);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn backend(base_url: String, timeout_s: f64, auth_env: &str) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig { base_url, timeout_s, auth_env: auth_env.into(), ..RemoteConfig::default() })
        .unwrap()
}

#[test]
fn chat_completion_round_trip() {
    let (url, seen) = mock(|path, _| match path {
        "/v1/chat/completions" => (
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":" How did that feel? "}}]}"#.into(),
            Duration::ZERO,
        ),
        _ => (404, "{}".into(), Duration::ZERO),
    });
    std::env::set_var("COACH_TEST_TOKEN_A", "sekret");
    let b = backend(url, 5.0, "COACH_TEST_TOKEN_A");
    let mut history = ChatHistory::new("We practise gratitude.");
    let reply = complete(&b, &mut history, "I had a nice yoga class.").unwrap();
    assert_eq!(reply, "How did that feel?");
    assert_eq!(history.len(), 3);

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekret"));
    let msgs = seen[0].body["messages"].as_array().unwrap();
    assert_eq!(msgs[0]["role"], "system");
    assert_eq!(msgs[1]["role"], "user");
    assert_eq!(msgs[1]["content"], "I had a nice yoga class.");
    assert_eq!(seen[0].body["model"], "gpt-3.5-turbo");
}

#[test]
fn moderation_parses_categories() {
    let (url, _) = mock(|path, body| {
        assert_eq!(path, "/v1/moderations");
        let flagged = body["input"].as_str().unwrap().contains("punch");
        let reply = format!(
            r#"{{"results":[{{"flagged":{flagged},"categories":{{"violence":{flagged},"sexual":false}}}}]}}"#
        );
        (200, reply, Duration::ZERO)
    });
    let b = backend(url, 5.0, "");
    let v = moderate(&b, "I want to punch someone").unwrap();
    assert!(v.flagged);
    assert!(v.categories.contains("violence"));
    assert!(!moderate(&b, "yoga").unwrap().flagged);
}

#[test]
fn http_errors_are_typed() {
    let (url, _) = mock(|_, _| (503, r#"{"error":"overloaded"}"#.into(), Duration::ZERO));
    let b = backend(url, 5.0, "");
    let err = b.complete_raw(&ChatHistory::new("x"), "hi").unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 503, .. }), "{err:?}");
    assert!(err.is_transient());
}

#[test]
fn timeout_fails_closed() {
    let (url, _) = mock(|_, _| (200, r#"{"results":[{"flagged":false}]}"#.into(), Duration::from_millis(1500)));
    let b = backend(url, 0.3, "");
    let (verdict, err) = moderate_fail_closed(&b, "hello");
    assert!(verdict.flagged);
    assert!(matches!(err, Some(LlmError::Timeout(_))), "{err:?}");
}

#[test]
fn malformed_response_is_protocol_error() {
    let (url, _) = mock(|_, _| (200, r#"{"choices":[]}"#.into(), Duration::ZERO));
    let b = backend(url, 5.0, "");
    assert!(matches!(b.complete_raw(&ChatHistory::new("x"), "hi"), Err(LlmError::Protocol(_))));
}

#[test]
fn missing_credential_is_reported() {
    let b = backend("http://127.0.0.1:9".into(), 1.0, "COACH_TEST_SURELY_UNSET_VAR");
    assert_eq!(
        b.require_credential(),
        Err(LlmError::MissingCredential("COACH_TEST_SURELY_UNSET_VAR".into()))
    );
}
