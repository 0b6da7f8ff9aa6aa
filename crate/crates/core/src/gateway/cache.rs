use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{LlmRequest, LlmResponse};
use crate::error::Result;
use crate::fsutil;

/// One stored transcript, `<dir>/<digest>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: LlmRequest,
    pub response: LlmResponse,
    /// Seconds since the Unix epoch when the reply was stored.
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(digest);
        if !path.exists() {
            return Ok(None);
        }
        fsutil::read_json(&path).map(Some)
    }

    pub fn put(&self, digest: &str, request: &LlmRequest, response: &LlmResponse) -> Result<()> {
        let entry = CacheEntry {
            request: request.clone(),
            response: LlmResponse {
                cached: false,
                ..response.clone()
            },
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        fsutil::write_json(&self.path_for(digest), &entry)
    }
}
