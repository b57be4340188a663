#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use vragent_core::backends::http::{HttpChat, HttpEndpoint};
use vragent_core::backends::{BackendError, CallPurpose, ChatModel, ChatRequest};

/// Serves `statuses` in order, one per connection, then keeps repeating the
/// last one. Returns the URL and a hit counter.
fn serve(statuses: Vec<u16>, body: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let status = statuses[n.min(statuses.len() - 1)];
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut buf = vec![0u8; length];
            let _ = reader.read_exact(&mut buf);
            let payload = if status == 200 { body } else { "{}" };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, hits)
}

fn chat(url: String, retries: u32) -> HttpChat {
    HttpChat::new(HttpEndpoint { retries, backoff_ms: 1, timeout_secs: 5, ..HttpEndpoint::new(url, "m") })
}

fn request() -> ChatRequest {
    ChatRequest::prompt(CallPurpose::Answer, "hello".into(), None, 0.0, 8)
}

#[test]
fn server_errors_use_whole_retry_budget() {
    let (url, hits) = serve(vec![503], "");
    let err = chat(url, 2).complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn recovers_after_transient_failure() {
    let (url, hits) = serve(vec![429, 200], r#"{"choices":[{"message":{"content":"ok"}}]}"#);
    assert_eq!(chat(url, 2).complete(&request()).unwrap(), "ok");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(vec![400], "");
    assert!(chat(url, 3).complete(&request()).is_err());
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn refused_connection_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = chat(format!("http://127.0.0.1:{port}/"), 1).complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { .. }));
}
