//! Wire-format and retry behavior of the HTTP backend against a local
//! single-threaded test server.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use fieldvqa::backend::{Backend, BackendError, ChatRequest, HttpBackend, RetryPolicy};
use fieldvqa::dataset::ImageRef;
use fieldvqa::prompt::{RenderedPrompt, Strategy};

/// Serves the scripted `(status, body)` responses in order, one connection
/// each, and sends every captured request (headers + body) down the channel.
fn spawn_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind localhost");
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(pair) => pair,
                Err(_) => return,
            };
            stream
                .set_read_timeout(Some(Duration::from_secs(5)))
                .unwrap();
            let mut raw = Vec::new();
            let mut buf = [0u8; 4096];
            let request = loop {
                match stream.read(&mut buf) {
                    Ok(0) => break String::from_utf8_lossy(&raw).into_owned(),
                    Ok(n) => {
                        raw.extend_from_slice(&buf[..n]);
                        let text = String::from_utf8_lossy(&raw);
                        if let Some(header_end) = text.find("\r\n\r\n") {
                            let content_length = text
                                .lines()
                                .find(|l| l.to_ascii_lowercase().starts_with("content-length:"))
                                .and_then(|l| l.split(':').nth(1))
                                .and_then(|v| v.trim().parse::<usize>().ok())
                                .unwrap_or(0);
                            if raw.len() >= header_end + 4 + content_length {
                                break text.into_owned();
                            }
                        }
                    }
                    Err(_) => break String::from_utf8_lossy(&raw).into_owned(),
                }
            };
            tx.send(request).ok();
            let reason = match status {
                200 => "OK",
                401 => "Unauthorized",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                _ => "Status",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).ok();
        }
    });
    (format!("http://{addr}"), rx)
}

fn chat_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}

fn request() -> ChatRequest {
    let mut req = ChatRequest::new(
        "test-model",
        RenderedPrompt {
            field_ids: vec!["tax".to_string()],
            text: "Given the following image of a receipt, extract the Tax.".to_string(),
            images: vec![ImageRef::Inline {
                mime: "image/png".to_string(),
                data: vec![1, 2, 3],
            }],
        },
        "doc1",
        Strategy::Separate,
    );
    req.timeout = Duration::from_secs(5);
    req
}

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        initial_backoff: Duration::from_millis(10),
        backoff_factor: 2.0,
        max_backoff: Duration::from_millis(50),
    }
}

#[test]
fn request_body_matches_the_chat_completions_shape() {
    let (base_url, rx) = spawn_server(vec![(200, chat_body("tax: 4.364"))]);
    let backend = HttpBackend::new(base_url)
        .unwrap()
        .with_api_key(Some("test-key".to_string()));
    let response = backend.send(&request()).unwrap();
    assert_eq!(response.text, "tax: 4.364");
    assert_eq!(response.attempt_count, 1);

    let captured = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(captured.starts_with("POST /chat/completions HTTP/1.1"));
    assert!(
        captured.contains("authorization: Bearer test-key")
            || captured.contains("Authorization: Bearer test-key")
    );
    let body_start = captured.find("\r\n\r\n").unwrap() + 4;
    let body: serde_json::Value = serde_json::from_str(&captured[body_start..]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 256);
    let content = &body["messages"][0]["content"];
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(content[0]["type"], "text");
    assert_eq!(
        content[0]["text"],
        "Given the following image of a receipt, extract the Tax."
    );
    assert_eq!(content[1]["type"], "image_url");
    let url = content[1]["image_url"]["url"].as_str().unwrap();
    assert!(url.starts_with("data:image/png;base64,"));
}

#[test]
fn transient_failures_are_retried_with_attempt_count() {
    let (base_url, _rx) = spawn_server(vec![
        (500, "{}".to_string()),
        (429, "{}".to_string()),
        (200, chat_body("ok")),
    ]);
    let backend = HttpBackend::new(base_url)
        .unwrap()
        .with_retry(fast_retry(3));
    let response = backend.send(&request()).unwrap();
    assert_eq!(response.text, "ok");
    assert_eq!(response.attempt_count, 3);
}

#[test]
fn auth_failure_is_not_retried() {
    let (base_url, rx) = spawn_server(vec![(401, "{}".to_string()), (200, chat_body("never"))]);
    let backend = HttpBackend::new(base_url)
        .unwrap()
        .with_retry(fast_retry(3));
    match backend.send(&request()) {
        Err(BackendError::Auth { status: 401 }) => {}
        other => panic!("expected auth error, got {other:?}"),
    }
    // Exactly one request must have reached the server.
    assert!(rx.recv_timeout(Duration::from_secs(5)).is_ok());
    assert!(rx.recv_timeout(Duration::from_millis(300)).is_err());
}

#[test]
fn retry_budget_exhaustion_reports_the_last_error() {
    let responses = vec![(500, "{}".to_string()); 3];
    let (base_url, _rx) = spawn_server(responses);
    let backend = HttpBackend::new(base_url)
        .unwrap()
        .with_retry(fast_retry(2));
    match backend.send(&request()) {
        Err(BackendError::Server {
            status: 500,
            attempts,
        }) => assert_eq!(attempts, 3),
        other => panic!("expected server error, got {other:?}"),
    }
}

#[test]
fn malformed_response_shape_is_reported() {
    let (base_url, _rx) = spawn_server(vec![(200, r#"{"unexpected": true}"#.to_string())]);
    let backend = HttpBackend::new(base_url).unwrap();
    match backend.send(&request()) {
        Err(BackendError::BadResponse { .. }) => {}
        other => panic!("expected bad-response error, got {other:?}"),
    }
}
