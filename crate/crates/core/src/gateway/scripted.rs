use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{request_digest, Backend, BackendError, BackendReply, FinishReason, LlmRequest};
use crate::error::{Error, Result};
use crate::fsutil;

/// A reply selected by substring matching on the request.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ScriptedRule {
    #[serde(default)]
    pub name: Option<String>,
    /// Every pattern must occur in the system message or the latest user prompt.
    #[serde(default)]
    pub when: Vec<String>,
    /// Every pattern must occur somewhere in the conversation, history included.
    #[serde(default)]
    pub context: Vec<String>,
    /// No pattern may occur in the latest user prompt.
    #[serde(default)]
    pub unless: Vec<String>,
    pub reply: String,
    #[serde(default)]
    pub finish: FinishReason,
}

impl ScriptedRule {
    pub fn new(when: &[&str], reply: impl Into<String>) -> Self {
        Self {
            name: None,
            when: when.iter().map(|s| s.to_string()).collect(),
            context: Vec::new(),
            unless: Vec::new(),
            reply: reply.into(),
            finish: FinishReason::Complete,
        }
    }

    pub fn with_context(mut self, context: &[&str]) -> Self {
        self.context = context.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn unless(mut self, patterns: &[&str]) -> Self {
        self.unless = patterns.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn finishing(mut self, finish: FinishReason) -> Self {
        self.finish = finish;
        self
    }

    fn matches(&self, request: &LlmRequest) -> bool {
        let head = |p: &String| {
            request.user_prompt.contains(p.as_str()) || request.system_message.contains(p.as_str())
        };
        let anywhere = |p: &String| {
            head(p)
                || request
                    .history
                    .iter()
                    .any(|t| t.content.contains(p.as_str()))
        };
        self.when.iter().all(head)
            && self.context.iter().all(anywhere)
            && !self
                .unless
                .iter()
                .any(|p| request.user_prompt.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub digest: String,
    pub user_prompt: String,
    /// Name (or index) of the rule that answered, `digest` for digest fixtures.
    pub matched: String,
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    #[serde(default)]
    rule: Vec<ScriptedRule>,
    #[serde(default)]
    digest: Vec<DigestFixture>,
}

#[derive(Debug, Deserialize)]
struct DigestFixture {
    digest: String,
    reply: String,
    #[serde(default)]
    finish: FinishReason,
}

/// Offline backend answering from hand-authored fixtures.
///
/// Replies keyed by exact request digest take precedence; otherwise the first
/// matching rule, in file order, answers. Every call is recorded in a ledger.
/// An unmatched request is a fatal error.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_digest: HashMap<String, (String, FinishReason)>,
    rules: Vec<ScriptedRule>,
    ledger: Mutex<Vec<LedgerEntry>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: Vec<ScriptedRule>) -> Self {
        Self {
            rules,
            ..Self::default()
        }
    }

    pub fn with_digest(mut self, digest: impl Into<String>, reply: impl Into<String>) -> Self {
        self.by_digest
            .insert(digest.into(), (reply.into(), FinishReason::Complete));
        self
    }

    pub fn push_rule(&mut self, rule: ScriptedRule) {
        self.rules.push(rule);
    }

    /// Loads `<dir>/fixtures.toml` (rules and digest replies) and any
    /// `<dir>/digests/<digest>.txt` files.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut backend = Self::new();
        let toml_path = dir.join("fixtures.toml");
        if toml_path.exists() {
            let text = fsutil::read_to_string(&toml_path)?;
            let file: FixtureFile = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", toml_path.display())))?;
            backend.rules = file.rule;
            for d in file.digest {
                backend.by_digest.insert(d.digest, (d.reply, d.finish));
            }
        }
        let digest_dir = dir.join("digests");
        if digest_dir.is_dir() {
            let entries = std::fs::read_dir(&digest_dir).map_err(|e| Error::io(&digest_dir, e))?;
            for entry in entries {
                let path = entry.map_err(|e| Error::io(&digest_dir, e))?.path();
                if path.extension().is_some_and(|e| e == "txt") {
                    let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                    let reply = fsutil::read_to_string(&path)?;
                    backend
                        .by_digest
                        .insert(stem, (reply, FinishReason::Complete));
                }
            }
        }
        if backend.rules.is_empty() && backend.by_digest.is_empty() {
            return Err(Error::Config(format!(
                "no fixtures found under {}",
                dir.display()
            )));
        }
        Ok(backend)
    }

    pub fn call_count(&self) -> usize {
        self.ledger.lock().unwrap().len()
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger.lock().unwrap().clone()
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn call(&self, request: &LlmRequest) -> Result<BackendReply, BackendError> {
        let digest = request_digest(request);
        let found = if let Some((text, finish)) = self.by_digest.get(&digest) {
            Some((text.clone(), *finish, "digest".to_string()))
        } else {
            self.rules
                .iter()
                .enumerate()
                .find(|(_, r)| r.matches(request))
                .map(|(i, r)| {
                    let label = r.name.clone().unwrap_or_else(|| format!("rule #{i}"));
                    (r.reply.clone(), r.finish, label)
                })
        };
        self.ledger.lock().unwrap().push(LedgerEntry {
            digest: digest.clone(),
            user_prompt: request.user_prompt.clone(),
            matched: found.as_ref().map(|f| f.2.clone()).unwrap_or_default(),
        });
        match found {
            Some((text, finish_reason, _)) => Ok(BackendReply {
                text,
                finish_reason,
            }),
            None => {
                let head: String = request.user_prompt.chars().take(160).collect();
                Err(BackendError::Fatal(format!(
                    "no scripted reply for request {digest} (prompt starts: {head:?})"
                )))
            }
        }
    }
}
