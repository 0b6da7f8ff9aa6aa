//! Chat-completion gateway.
//!
//! [`Gateway::complete`] is the only way pipeline stages talk to a model. It
//! answers from the content-addressed cache when it can, otherwise calls the
//! configured [`Backend`] with bounded exponential backoff, persists the
//! transcript, and returns it. Concurrent callers share an in-flight limit, and
//! duplicate concurrent requests collapse into one backend call.

mod cache;
mod http;
mod profile;
mod replay;
mod scripted;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheEntry, ResponseCache};
pub use http::{outbound_call_count, HttpBackend};
pub use profile::{build_profile, ProfileConfig, Stage, StageProfile};
pub use replay::RecordReplay;
pub use scripted::{LedgerEntry, ScriptedBackend, ScriptedRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

/// A fully specified chat call.
///
/// `history` holds the earlier turns of a multi-turn conversation; the
/// request's own prompt is always the final user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model_id: String,
    pub system_message: String,
    #[serde(default)]
    pub history: Vec<ChatTurn>,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub extra_params: BTreeMap<String, serde_json::Value>,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }

    /// Continues this conversation: the current prompt and `reply` move into
    /// the history and `next_prompt` becomes the new user turn.
    pub fn follow_up(&self, reply: &str, next_prompt: impl Into<String>) -> LlmRequest {
        let mut next = self.clone();
        next.history.push(ChatTurn {
            role: Role::User,
            content: self.user_prompt.clone(),
        });
        next.history.push(ChatTurn {
            role: Role::Assistant,
            content: reply.to_string(),
        });
        next.user_prompt = next_prompt.into();
        next
    }

    /// Canonical JSON: object keys sorted at every level, no insignificant whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let mut out = String::new();
        write_canonical(&value, &mut out);
        out
    }

    pub fn digest(&self) -> String {
        request_digest(self)
    }
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// SHA-256 hex digest of the request's canonical serialization.
pub fn request_digest(request: &LlmRequest) -> String {
    hex::encode(Sha256::digest(request.canonical_json().as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Complete,
    Truncated,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub backend_id: String,
    pub cached: bool,
}

/// What a backend hands back for one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: rate limits, 5xx, transport failures.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, request: &LlmRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request {digest}: {message}")]
    InvalidRequest { digest: String, message: String },
    #[error("request {digest} failed after {attempts} attempts: {last_error}")]
    RetriesExhausted {
        digest: String,
        attempts: u32,
        last_error: String,
    },
    #[error("request {digest} failed: {message}")]
    Backend { digest: String, message: String },
    #[error("cache error for {digest}: {message}")]
    Cache { digest: String, message: String },
}

impl GatewayError {
    pub fn digest(&self) -> &str {
        match self {
            GatewayError::InvalidRequest { digest, .. }
            | GatewayError::RetriesExhausted { digest, .. }
            | GatewayError::Backend { digest, .. }
            | GatewayError::Cache { digest, .. } => digest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base · 2^(attempt-1), capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32
            .checked_shl(attempt.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct InFlightLimit {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

type Flight = Arc<OnceLock<Result<LlmResponse, GatewayError>>>;

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limit: InFlightLimit,
    flights: Mutex<HashMap<String, Flight>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("cache", &self.cache)
            .field("retry", &self.retry)
            .field("max_in_flight", &self.limit.limit)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            limit: InFlightLimit::new(4),
            flights: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache = Some(ResponseCache::new(dir));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limit = InFlightLimit::new(limit);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        let digest = request_digest(request);
        request
            .validate()
            .map_err(|message| GatewayError::InvalidRequest {
                digest: digest.clone(),
                message,
            })?;
        if let Some(hit) = self.lookup(&digest)? {
            return Ok(hit);
        }

        let flight = {
            let mut flights = self.flights.lock().unwrap();
            flights.entry(digest.clone()).or_default().clone()
        };
        let result = flight
            .get_or_init(|| self.execute(request, &digest))
            .clone();
        {
            let mut flights = self.flights.lock().unwrap();
            if flights
                .get(&digest)
                .is_some_and(|f| Arc::ptr_eq(f, &flight))
            {
                flights.remove(&digest);
            }
        }
        result
    }

    fn lookup(&self, digest: &str) -> Result<Option<LlmResponse>, GatewayError> {
        let Some(cache) = &self.cache else {
            return Ok(None);
        };
        let entry = cache.get(digest).map_err(|e| GatewayError::Cache {
            digest: digest.to_string(),
            message: e.to_string(),
        })?;
        Ok(entry.map(|e| LlmResponse {
            cached: true,
            ..e.response
        }))
    }

    fn execute(&self, request: &LlmRequest, digest: &str) -> Result<LlmResponse, GatewayError> {
        // a flight that finished between our lookup and joining leaves its reply in the cache
        if let Some(hit) = self.lookup(digest)? {
            return Ok(hit);
        }
        let _permit = self.limit.acquire();
        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            match self.backend.call(request) {
                Ok(reply) => break reply,
                Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::Backend {
                        digest: digest.to_string(),
                        message,
                    })
                }
                Err(BackendError::Transient(message)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::RetriesExhausted {
                            digest: digest.to_string(),
                            attempts: attempt,
                            last_error: message,
                        });
                    }
                    tracing::debug!(digest, attempt, "transient failure, retrying: {message}");
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        };
        if reply.finish_reason == FinishReason::Truncated {
            tracing::warn!(digest, "reply truncated at the output token limit");
        }
        let response = LlmResponse {
            text: reply.text,
            finish_reason: reply.finish_reason,
            backend_id: self.backend.id().to_string(),
            cached: false,
        };
        if let Some(cache) = &self.cache {
            cache
                .put(digest, request, &response)
                .map_err(|e| GatewayError::Cache {
                    digest: digest.to_string(),
                    message: e.to_string(),
                })?;
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    pub(crate) fn request(prompt: &str) -> LlmRequest {
        LlmRequest {
            model_id: "test-model".into(),
            system_message: "system".into(),
            history: vec![],
            user_prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: 4000,
            extra_params: BTreeMap::new(),
        }
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        finish: FinishReason,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn call(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                return Err(BackendError::Transient(format!("failure {n}")));
            }
            std::thread::sleep(Duration::from_millis(20));
            Ok(BackendReply {
                text: format!("echo: {}", request.user_prompt),
                finish_reason: self.finish,
            })
        }
    }

    fn flaky(failures: usize) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures,
            calls: AtomicUsize::new(0),
            finish: FinishReason::Complete,
        })
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    #[test]
    fn digest_is_deterministic_and_field_sensitive() {
        let a = request("hello");
        assert_eq!(request_digest(&a), request_digest(&a.clone()));
        let mut hot = a.clone();
        hot.temperature = 1.0;
        assert_ne!(request_digest(&a), request_digest(&hot));
        let mut other = a.clone();
        other.max_output_tokens = 3999;
        assert_ne!(request_digest(&a), request_digest(&other));
        let followed = a.follow_up("reply", "hello");
        assert_ne!(request_digest(&a), request_digest(&followed));
    }

    #[test]
    fn digest_ignores_extra_param_insertion_order() {
        let mut forward = request("x");
        let mut backward = request("x");
        let params = [
            ("top_p", serde_json::json!(0.95)),
            ("top_k", serde_json::json!(64)),
            ("presence_penalty", serde_json::json!(0.0)),
        ];
        for (k, v) in params.iter() {
            forward.extra_params.insert(k.to_string(), v.clone());
        }
        for (k, v) in params.iter().rev() {
            backward.extra_params.insert(k.to_string(), v.clone());
        }
        assert_eq!(request_digest(&forward), request_digest(&backward));
        assert!(!forward.canonical_json().contains(' '));
    }

    #[test]
    fn validation_runs_before_backend() {
        let backend = flaky(0);
        let gw = Gateway::new(backend.clone());
        let mut bad = request("x");
        bad.temperature = 2.5;
        assert!(matches!(
            gw.complete(&bad),
            Err(GatewayError::InvalidRequest { .. })
        ));
        bad.temperature = 0.0;
        bad.max_output_tokens = 0;
        assert!(matches!(
            gw.complete(&bad),
            Err(GatewayError::InvalidRequest { .. })
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn retries_transient_failures() {
        let backend = flaky(3);
        let gw = Gateway::new(backend.clone()).with_retry(fast_retry());
        let resp = gw.complete(&request("hi")).unwrap();
        assert_eq!(resp.text, "echo: hi");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn exhausted_retries_carry_digest() {
        let backend = flaky(10);
        let gw = Gateway::new(backend.clone()).with_retry(fast_retry());
        let req = request("hi");
        match gw.complete(&req) {
            Err(GatewayError::RetriesExhausted {
                digest, attempts, ..
            }) => {
                assert_eq!(digest, request_digest(&req));
                assert_eq!(attempts, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(policy.delay(1), Duration::from_millis(100));
        assert_eq!(policy.delay(2), Duration::from_millis(200));
        assert_eq!(policy.delay(3), Duration::from_millis(350));
        assert_eq!(policy.delay(40), Duration::from_millis(350));
    }

    #[test]
    fn cache_hit_is_identical_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let backend = flaky(0);
        let gw = Gateway::new(backend.clone()).with_cache(dir.path());
        let req = request("cache me");
        let first = gw.complete(&req).unwrap();
        assert!(!first.cached);
        let second = gw.complete(&req).unwrap();
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(first.finish_reason, second.finish_reason);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert!(dir
            .path()
            .join(format!("{}.json", request_digest(&req)))
            .exists());
    }

    #[test]
    fn truncation_is_surfaced_not_retried() {
        let backend = Arc::new(Flaky {
            failures: 0,
            calls: AtomicUsize::new(0),
            finish: FinishReason::Truncated,
        });
        let gw = Gateway::new(backend.clone());
        let resp = gw.complete(&request("long")).unwrap();
        assert_eq!(resp.finish_reason, FinishReason::Truncated);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn duplicate_concurrent_requests_make_one_call() {
        let backend = flaky(0);
        let gw = Gateway::new(backend.clone()).with_max_in_flight(8);
        let req = request("same");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| assert_eq!(gw.complete(&req).unwrap().text, "echo: same"));
            }
        });
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    struct Gauge {
        active: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for Gauge {
        fn id(&self) -> &str {
            "gauge"
        }
        fn call(&self, _: &LlmRequest) -> Result<BackendReply, BackendError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(15));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(BackendReply {
                text: "ok".into(),
                finish_reason: FinishReason::Complete,
            })
        }
    }

    #[test]
    fn in_flight_bound_is_respected() {
        let backend = Arc::new(Gauge {
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Gateway::new(backend.clone()).with_max_in_flight(2);
        std::thread::scope(|s| {
            for i in 0..10 {
                let gw = &gw;
                s.spawn(move || gw.complete(&request(&format!("r{i}"))).unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
    }
}
