//! Run configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Secrets never live in the file: API keys come from `HYPOFORGE_API_KEY` and
//! `HYPOFORGE_EVAL_API_KEY`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::categorization::{MergeSettings, DEFAULT_CHUNKS, DEFAULT_IDEA_CAP, DEFAULT_TURN_BUDGET};
use crate::domain::DomainProfile;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gateway::{ProfileConfig, RetryPolicy, Stage};

pub const API_KEY_ENV: &str = "HYPOFORGE_API_KEY";
pub const EVAL_API_KEY_ENV: &str = "HYPOFORGE_EVAL_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Live,
    Scripted,
    Replay,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(BackendKind::Live),
            "scripted" => Ok(BackendKind::Scripted),
            "replay" => Ok(BackendKind::Replay),
            other => Err(Error::Config(format!(
                "unknown backend `{other}` (expected live, scripted or replay)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub manifest: PathBuf,
    /// Defaults to the manifest's directory.
    #[serde(default)]
    pub text_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub runs: PathBuf,
    pub cache: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            runs: "runs".into(),
            cache: "cache".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_id: String,
    /// Scripted-fixture directory.
    pub fixtures: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            kind: BackendKind::Live,
            base_url: None,
            model_id: ProfileConfig::default().primary_model,
            fixtures: None,
            timeout_secs: 120,
            max_in_flight: 4,
            max_attempts: retry.max_attempts,
            base_delay_ms: retry.base_delay.as_millis() as u64,
            max_delay_ms: retry.max_delay.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBackendConfig {
    /// A distinct endpoint for evaluation; the primary backend is used when unset.
    pub base_url: Option<String>,
    pub model_id: String,
}

impl Default for EvalBackendConfig {
    fn default() -> Self {
        Self {
            base_url: None,
            model_id: ProfileConfig::default().eval_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub n_samples: usize,
    pub pair_cap: Option<usize>,
    pub seed: u64,
    /// Set labels paired against each other; the first two manifest sets when unset.
    pub sets: Option<[String; 2]>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_samples: 3,
            pair_cap: None,
            seed: 0,
            sets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategorizationConfig {
    pub chunks: usize,
    pub idea_cap: usize,
    pub turn_budget: usize,
}

impl Default for CategorizationConfig {
    fn default() -> Self {
        Self {
            chunks: DEFAULT_CHUNKS,
            idea_cap: DEFAULT_IDEA_CAP,
            turn_budget: DEFAULT_TURN_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// CSV of `hypothesis_id,synergy_label,grounding_label`.
    pub annotations: Option<PathBuf>,
    /// JSON array of per-chart HMI counts and mechanism flags.
    pub chart_audits: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Built-in domain profile name.
    #[serde(default = "default_domain")]
    pub domain: String,
    /// Full profile overriding `domain`.
    #[serde(default)]
    pub domain_profile: Option<DomainProfile>,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub eval_backend: EvalBackendConfig,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub temperatures: BTreeMap<Stage, f64>,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub categorization: CategorizationConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_domain() -> String {
    DomainProfile::cryogenic_hea().name
}

fn default_max_output_tokens() -> u32 {
    ProfileConfig::default().max_output_tokens
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let mut config = Self::from_toml(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.corpus.manifest)
    }

    pub fn text_root(&self) -> PathBuf {
        match &self.corpus.text_root {
            Some(root) => self.resolve(root),
            None => self
                .manifest_path()
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default(),
        }
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.resolve(&self.paths.runs)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.resolve(&self.paths.cache)
    }

    pub fn fixtures_dir(&self) -> Option<PathBuf> {
        self.backend.fixtures.as_deref().map(|p| self.resolve(p))
    }

    pub fn domain_profile(&self) -> Result<DomainProfile> {
        let profile = match &self.domain_profile {
            Some(profile) => profile.clone(),
            None => DomainProfile::builtin(&self.domain)?,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn profile_config(&self) -> ProfileConfig {
        ProfileConfig {
            primary_model: self.backend.model_id.clone(),
            eval_model: self.eval_backend.model_id.clone(),
            max_output_tokens: self.max_output_tokens,
            temperature_overrides: self.temperatures.clone(),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.backend.max_attempts,
            base_delay: Duration::from_millis(self.backend.base_delay_ms),
            max_delay: Duration::from_millis(self.backend.max_delay_ms),
        }
    }

    pub fn merge_settings(&self) -> MergeSettings {
        MergeSettings {
            cap: self.categorization.idea_cap,
            turn_budget: self.categorization.turn_budget,
        }
    }

    /// Checks every setting that can be checked without touching a backend.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("generation.n_samples", self.generation.n_samples),
            ("categorization.chunks", self.categorization.chunks),
            ("categorization.idea_cap", self.categorization.idea_cap),
            (
                "categorization.turn_budget",
                self.categorization.turn_budget,
            ),
            ("backend.max_in_flight", self.backend.max_in_flight),
            ("backend.max_attempts", self.backend.max_attempts as usize),
            ("backend.timeout_secs", self.backend.timeout_secs as usize),
            ("max_output_tokens", self.max_output_tokens as usize),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.generation.pair_cap == Some(0) {
            return Err(Error::Config("generation.pair_cap must be positive".into()));
        }
        let domain = self.domain_profile()?;
        for stage in Stage::ALL {
            crate::gateway::build_profile(stage, &domain, &self.profile_config())?;
        }
        if self.backend.model_id.trim().is_empty() || self.eval_backend.model_id.trim().is_empty() {
            return Err(Error::Config("model ids must not be empty".into()));
        }
        Ok(())
    }

    /// Temperature overrides that differ from the stage defaults. They are
    /// allowed, but runs made with them are not comparable to default runs.
    pub fn temperature_deviations(&self) -> Vec<String> {
        self.temperatures
            .iter()
            .filter(|(stage, t)| **t != stage.default_temperature())
            .map(|(stage, t)| {
                format!(
                    "{stage} temperature {t} differs from the default {}",
                    stage.default_temperature()
                )
            })
            .collect()
    }

    /// Checks the settings the selected backend needs.
    pub fn validate_backend(&self) -> Result<()> {
        match self.backend.kind {
            BackendKind::Live
                if self
                    .backend
                    .base_url
                    .as_deref()
                    .is_none_or(|u| u.trim().is_empty()) =>
            {
                Err(Error::Config(
                    "backend.base_url is required for the live backend".into(),
                ))
            }
            BackendKind::Scripted if self.backend.fixtures.is_none() => Err(Error::Config(
                "backend.fixtures (or --fixtures) is required for the scripted backend".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The settings that determine run outputs, without filesystem locations.
    pub fn identity(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().unwrap();
        map.remove("paths");
        map.remove("corpus");
        map.remove("audit");
        if let Some(backend) = map.get_mut("backend").and_then(|b| b.as_object_mut()) {
            backend.remove("fixtures");
            backend.remove("timeout_secs");
            backend.remove("max_in_flight");
        }
        value
    }
}
