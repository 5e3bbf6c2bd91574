use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use promptflow::backend::{Backend, BackendConfig, BackendError, BackendKind, HttpBackend, RetryConfig};
use promptflow_core::GenerationRequest;

struct Seen {
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { authorization, body: serde_json::from_slice(&buf).unwrap() });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn config(url: String) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        base_url: url,
        model: "test-model".into(),
        retry: RetryConfig { max_attempts: 3, base_backoff_ms: 1 },
        timeout_ms: 5_000,
        ..BackendConfig::default()
    }
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": text } }],
        "usage": { "prompt_tokens": 7, "completion_tokens": 2 }
    })
    .to_string()
}

#[test]
fn rate_limit_then_success_retries_once() {
    let (url, seen, handle) = stub(vec![(429, "{}".into()), (200, completion("hello"))]);
    let b = HttpBackend::with_api_key(config(url), Some("sk-test".into())).unwrap();
    let mut req = GenerationRequest::user("say hello");
    req.temperature = 0.3;
    let r = b.generate(&req).unwrap();
    handle.join().unwrap();
    assert_eq!(r.text, "hello");
    assert_eq!(r.attempts, 2);
    assert_eq!((r.prompt_tokens, r.completion_tokens), (7, 2));
    let u = b.usage();
    assert_eq!((u.prompt_tokens, u.completion_tokens, u.calls), (7, 2, 1));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[1].body["model"], "test-model");
    assert_eq!(seen[1].body["temperature"], 0.3);
    assert_eq!(seen[1].body["messages"][0]["content"], "say hello");
}

#[test]
fn unauthorized_fails_without_retry() {
    let (url, seen, handle) = stub(vec![(401, "{}".into())]);
    let b = HttpBackend::with_api_key(config(url), None).unwrap();
    let e = b.generate(&GenerationRequest::user("x")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(e, BackendError::Auth(401)), "{e:?}");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].authorization, None);
}

#[test]
fn server_errors_exhaust_attempts() {
    let (url, seen, handle) = stub(vec![(503, "{}".into()), (500, "{}".into()), (502, "{}".into())]);
    let b = HttpBackend::with_api_key(config(url), None).unwrap();
    let e = b.generate(&GenerationRequest::user("x")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(e, BackendError::ServerError { status: 502, attempts: 3 }), "{e:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _, handle) = stub(vec![(200, "{\"choices\":[]}".into())]);
    let b = HttpBackend::with_api_key(config(url), None).unwrap();
    let e = b.generate(&GenerationRequest::user("x")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(e, BackendError::MalformedResponse(_)), "{e:?}");
}
