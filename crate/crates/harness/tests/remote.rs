use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rlv_core::task::parse_tokens;
use rlv_core::Generator;
use rlv_harness::backend::{BackendSpec, RemoteGenerator};
use rlv_harness::HarnessError;

/// Canned reply: status, body, delay before answering.
type Reply = (u16, String, Duration);

/// Serves `replies` in order, one connection each, and records request bodies.
fn mock_server(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body, delay) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(String::from_utf8(buf).unwrap());
            thread::sleep(delay);
            let mut stream = reader.into_inner();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

fn spec(url: &str) -> BackendSpec {
    BackendSpec { backoff_ms: 5, timeout_ms: 2000, ..BackendSpec::remote(url) }
}

#[test]
fn echoes_fixed_completion() {
    let (url, seen) = mock_server(vec![(200, r#"{"text": "4 STEP ANSWER 4 EOS"}"#.into(), Duration::ZERO)]);
    let mut g = RemoteGenerator::new(spec(&url), 0.7).unwrap();
    let out = g.generate(&parse_tokens("1 + 3 SEP").unwrap(), 12).unwrap();
    assert_eq!(out, parse_tokens("4 STEP ANSWER 4 EOS").unwrap());
    assert_eq!(g.last_retries, 0);
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "rlv");
    assert_eq!(body["prompt"], "1 + 3 SEP");
    assert_eq!(body["max_tokens"], 12);
    assert_eq!(body["temperature"], 0.7);
}

#[test]
fn retries_server_errors() {
    let ok = (200, r#"{"text": "done"}"#.to_string(), Duration::ZERO);
    let fail = (500, "{}".to_string(), Duration::ZERO);
    let (url, seen) = mock_server(vec![fail.clone(), fail, ok]);
    let mut g = RemoteGenerator::new(spec(&url), 1.0).unwrap();
    assert_eq!(g.complete("x", 4).unwrap(), "done");
    assert_eq!(g.last_retries, 2);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn timeout_is_backend_unavailable() {
    let slow = (200, r#"{"text": "late"}"#.to_string(), Duration::from_millis(800));
    let (url, _) = mock_server(vec![slow.clone(), slow]);
    let mut g = RemoteGenerator::new(BackendSpec { timeout_ms: 100, max_retries: 1, ..spec(&url) }, 1.0).unwrap();
    let err = g.complete("x", 4).unwrap_err();
    assert!(matches!(err, HarnessError::BackendUnavailable(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn malformed_response_is_protocol_error() {
    let (url, _) = mock_server(vec![(200, r#"{"completion": "x"}"#.into(), Duration::ZERO)]);
    let mut g = RemoteGenerator::new(spec(&url), 1.0).unwrap();
    let err = g.complete("x", 4).unwrap_err();
    assert!(matches!(err, HarnessError::Protocol(_)), "{err}");
    assert_eq!(err.exit_code(), 4);

    let (url, _) = mock_server(vec![(200, r#"{"text": "not tokens"}"#.into(), Duration::ZERO)]);
    let mut g = RemoteGenerator::new(spec(&url), 1.0).unwrap();
    assert!(g.generate(&[], 4).is_err());
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut g = RemoteGenerator::new(BackendSpec { max_retries: 2, ..spec(&format!("http://127.0.0.1:{port}/")) }, 1.0).unwrap();
    assert!(matches!(g.complete("x", 1), Err(HarnessError::BackendUnavailable(_))));
    assert_eq!(g.last_retries, 2);
    assert!(RemoteGenerator::new(BackendSpec { endpoint: String::new(), ..spec("") }, 1.0).is_err());
}
