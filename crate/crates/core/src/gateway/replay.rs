use std::path::PathBuf;
use std::sync::Arc;

use super::{
    request_digest, Backend, BackendError, BackendReply, LlmRequest, LlmResponse, ResponseCache,
};

enum Mode {
    Record(Arc<dyn Backend>),
    Replay,
}

/// Record/replay wrapper over a transcript directory in the cache format.
///
/// In record mode every reply from the inner backend is written to the
/// directory; in replay mode replies are served from it and a missing
/// transcript is a fatal error, so replay never reaches the network.
pub struct RecordReplay {
    mode: Mode,
    store: ResponseCache,
    id: String,
}

impl RecordReplay {
    pub fn record(inner: Arc<dyn Backend>, dir: impl Into<PathBuf>) -> Self {
        let id = format!("record({})", inner.id());
        Self {
            mode: Mode::Record(inner),
            store: ResponseCache::new(dir),
            id,
        }
    }

    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self {
            mode: Mode::Replay,
            store: ResponseCache::new(dir),
            id: "replay".into(),
        }
    }
}

impl Backend for RecordReplay {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        let digest = request_digest(request);
        match &self.mode {
            Mode::Replay => {
                let entry = self
                    .store
                    .get(&digest)
                    .map_err(|e| BackendError::Fatal(e.to_string()))?
                    .ok_or_else(|| {
                        BackendError::Fatal(format!("no recorded transcript for {digest}"))
                    })?;
                Ok(BackendReply {
                    text: entry.response.text,
                    finish_reason: entry.response.finish_reason,
                })
            }
            Mode::Record(inner) => {
                let reply = inner.call(request)?;
                let response = LlmResponse {
                    text: reply.text.clone(),
                    finish_reason: reply.finish_reason,
                    backend_id: inner.id().to_string(),
                    cached: false,
                };
                self.store
                    .put(&digest, request, &response)
                    .map_err(|e| BackendError::Fatal(e.to_string()))?;
                Ok(reply)
            }
        }
    }
}
