use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, BackendReply, FinishReason, LlmRequest, Role};

static OUTBOUND_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests issued by every [`HttpBackend`] in this process.
pub fn outbound_call_count() -> usize {
    OUTBOUND_CALLS.load(Ordering::SeqCst)
}

/// Generic chat-completions client: `POST {base_url}/chat/completions` with
/// optional bearer-token auth and an OpenAI-shaped body.
pub struct HttpBackend {
    id: String,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let base = base_url.trim_end_matches('/');
        Self {
            id: format!("http:{base}"),
            endpoint: format!("{base}/chat/completions"),
            api_key,
            agent,
        }
    }

    /// The JSON body sent for `request`.
    pub fn body(request: &LlmRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": request.system_message})];
        for turn in &request.history {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": turn.content}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let map = body.as_object_mut().unwrap();
        for (k, v) in &request.extra_params {
            map.insert(k.clone(), v.clone());
        }
        body
    }
}

fn parse_completion(body: &Value) -> Result<BackendReply, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Fatal(format!("response has no choices: {body}")))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        None | Some("stop") | Some("end_turn") | Some("STOP") => FinishReason::Complete,
        Some("length") | Some("max_tokens") | Some("MAX_TOKENS") => FinishReason::Truncated,
        Some(_) => FinishReason::Error,
    };
    Ok(BackendReply {
        text,
        finish_reason,
    })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        OUTBOUND_CALLS.fetch_add(1, Ordering::SeqCst);
        let mut builder = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            builder = builder.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = builder
            .send_json(Self::body(request))
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => {
                let body: Value = serde_json::from_str(&text)
                    .map_err(|e| BackendError::Fatal(format!("malformed response body: {e}")))?;
                parse_completion(&body)
            }
            408 | 409 | 425 | 429 | 500..=599 => {
                Err(BackendError::Transient(format!("HTTP {status}: {text}")))
            }
            _ => Err(BackendError::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}
