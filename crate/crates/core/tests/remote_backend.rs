use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cdrec::lm::{BackendError, PromptFields, PromptKind, RemoteBackend, RemoteConfig, TextBackend};

struct Recorded {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one scripted `(status, body)` reply per connection and records
/// every request it sees.
fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Recorded>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Recorded {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                auth,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn backend(base_url: String, max_retries: u32) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        base_url,
        chat_model: "chat-m".into(),
        embedding_model: "embed-m".into(),
        api_key: Some("secret".into()),
        timeout: Duration::from_secs(5),
        concurrency: 2,
        max_retries,
        backoff: Duration::from_millis(1),
    })
    .unwrap()
}

fn embedding(values: &[f64]) -> String {
    serde_json::json!({ "data": [{ "embedding": values }] }).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = mock(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, embedding(&[0.5, -1.0, 2.0])),
    ]);
    let b = backend(url, 3);
    assert_eq!(b.embed_text("hello").unwrap().0, vec![0.5, -1.0, 2.0]);
    assert_eq!(b.pinned_dim(), Some(3));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[2].path, "/v1/embeddings");
    assert_eq!(seen[2].auth.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[2].body["model"], "embed-m");
    assert_eq!(seen[2].body["input"], "hello");
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = mock(vec![(500, "{}".into()), (429, "{}".into())]);
    let err = backend(url, 1).embed_text("hello").unwrap_err();
    assert!(
        matches!(
            err,
            BackendError::Transport {
                attempts: 2,
                retryable: true,
                ..
            }
        ),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_fatal() {
    let (url, seen) = mock(vec![(400, r#"{"error":"bad"}"#.into())]);
    let err = backend(url, 5).embed_text("hello").unwrap_err();
    assert!(
        matches!(
            err,
            BackendError::Transport {
                attempts: 1,
                retryable: false,
                ..
            }
        ),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn embedding_width_is_pinned() {
    let (url, _) = mock(vec![(200, embedding(&[1.0, 2.0])), (200, embedding(&[1.0, 2.0, 3.0]))]);
    let b = backend(url, 0);
    b.embed_text("a").unwrap();
    assert!(matches!(b.embed_text("b"), Err(BackendError::Response(_))));
    assert_eq!(b.pinned_dim(), Some(2));
}

#[test]
fn malformed_and_empty_payloads_are_response_errors() {
    let (url, _) = mock(vec![
        (200, "not json".into()),
        (200, r#"{"data":[]}"#.into()),
        (200, r#"{"choices":[]}"#.into()),
    ]);
    let b = backend(url, 0);
    assert!(matches!(b.embed_text("a"), Err(BackendError::Response(_))));
    assert!(matches!(b.embed_text("a"), Err(BackendError::Response(_))));
    assert!(matches!(
        b.complete(
            PromptKind::ExplanationGeneration,
            &filled(PromptKind::ExplanationGeneration)
        ),
        Err(BackendError::Response(_))
    ));
    assert!(matches!(b.embed_text("  "), Err(BackendError::Input(_))));
}

fn filled(kind: PromptKind) -> PromptFields {
    kind.placeholders()
        .into_iter()
        .map(|p| (p.to_string(), format!("<{p}>")))
        .collect()
}

#[test]
fn chat_sends_rendered_prompt_and_returns_content() {
    let reply =
        serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": "{\"alpha\": 0.5}" } }] });
    let (url, seen) = mock(vec![(200, reply.to_string())]);
    let kind = PromptKind::StrategyPlanning;
    let out = backend(url, 0).complete(kind, &filled(kind)).unwrap();
    assert_eq!(out, "{\"alpha\": 0.5}");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].body["model"], "chat-m");
    assert_eq!(seen[0].body["temperature"], 0);
    let prompt = seen[0].body["messages"][0]["content"].as_str().unwrap();
    assert!(kind.placeholders().iter().all(|p| prompt.contains(&format!("<{p}>"))));
}

#[test]
fn missing_prompt_field_fails_before_sending() {
    let b = backend("http://127.0.0.1:9/v1".into(), 0);
    assert!(matches!(
        b.complete(PromptKind::AbstractGeneration, &PromptFields::new()),
        Err(BackendError::Template(_))
    ));
}
