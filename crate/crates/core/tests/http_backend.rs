//! The HTTP backend against a local server that fails before it answers.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use hypoforge_core::domain::DomainProfile;
use hypoforge_core::gateway::{
    build_profile, Gateway, GatewayError, HttpBackend, ProfileConfig, RecordReplay, RetryPolicy,
    Stage,
};

struct Seen {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

fn read_request(stream: &mut TcpStream) -> Seen {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line
        .split_whitespace()
        .nth(1)
        .unwrap_or_default()
        .to_string();
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    Seen {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let text = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(text.as_bytes()).unwrap();
}

/// Serves the given statuses in order, then the completion for every later request.
fn serve(script: Vec<&'static str>, reply: &'static str) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        let ok = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": reply}, "finish_reason": "stop"}]
        })
        .to_string();
        for (i, stream) in listener.incoming().enumerate() {
            let mut stream = stream.unwrap();
            let request = read_request(&mut stream);
            log.lock().unwrap().push(request);
            match script.get(i) {
                Some(status) => respond(&mut stream, status, "{\"error\":\"busy\"}"),
                None => respond(&mut stream, "200 OK", &ok),
            }
        }
    });
    (url, seen)
}

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(4),
    }
}

fn profile() -> hypoforge_core::gateway::StageProfile {
    build_profile(
        Stage::Evaluation,
        &DomainProfile::cryogenic_hea(),
        &ProfileConfig::default(),
    )
    .unwrap()
}

#[test]
fn transient_failures_are_retried_then_cached() {
    let (url, seen) = serve(
        vec!["503 Service Unavailable", "429 Too Many Requests"],
        "Grounding: Strong",
    );
    let cache = tempfile::tempdir().unwrap();
    let backend = Arc::new(HttpBackend::new(
        &url,
        Some("secret".into()),
        Duration::from_secs(10),
    ));
    let gw = Gateway::new(backend)
        .with_cache(cache.path())
        .with_retry(fast_retry(5));
    let request = profile().request("Assess the scientific grounding of this hypothesis.");

    let reply = gw.complete(&request).unwrap();
    assert_eq!(reply.text, "Grounding: Strong");
    assert!(!reply.cached);
    {
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().all(|s| s.path == "/v1/chat/completions"));
        assert_eq!(seen[2].authorization.as_deref(), Some("Bearer secret"));
        assert_eq!(seen[2].body["temperature"], 0.0);
        assert_eq!(seen[2].body["max_tokens"], 4000);
        assert_eq!(seen[2].body["top_p"], 0.95);
        assert_eq!(seen[2].body["top_k"], 64);
    }

    let again = gw.complete(&request).unwrap();
    assert!(again.cached);
    assert_eq!(again.text, reply.text);
    assert_eq!(
        seen.lock().unwrap().len(),
        3,
        "a cache hit must not reach the server"
    );
}

#[test]
fn retries_stop_at_the_attempt_budget() {
    let (url, seen) = serve(vec!["500 Internal Server Error"; 10], "unused");
    let backend = Arc::new(HttpBackend::new(&url, None, Duration::from_secs(10)));
    let gw = Gateway::new(backend).with_retry(fast_retry(3));
    let err = gw.complete(&profile().request("hello")).unwrap_err();
    assert!(
        matches!(err, GatewayError::RetriesExhausted { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(seen.lock().unwrap()[0].authorization.is_none());
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec!["400 Bad Request"], "unused");
    let backend = Arc::new(HttpBackend::new(&url, None, Duration::from_secs(10)));
    let gw = Gateway::new(backend).with_retry(fast_retry(5));
    let err = gw.complete(&profile().request("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::Backend { .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn recorded_transcripts_replay_offline() {
    let (url, seen) = serve(vec![], "Score: 4");
    let dir = tempfile::tempdir().unwrap();
    let live = Arc::new(HttpBackend::new(&url, None, Duration::from_secs(10)));
    let recorder = Gateway::new(Arc::new(RecordReplay::record(live, dir.path())));
    let request =
        profile().request("Evaluate whether the hypothesis below is Synergistic or Additive.");
    assert_eq!(recorder.complete(&request).unwrap().text, "Score: 4");

    let replay = Gateway::new(Arc::new(RecordReplay::replay(dir.path())));
    assert_eq!(replay.complete(&request).unwrap().text, "Score: 4");
    assert!(replay
        .complete(&profile().request("never recorded"))
        .is_err());
    assert_eq!(seen.lock().unwrap().len(), 1);
}
