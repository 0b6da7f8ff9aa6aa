use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::LlmRequest;
use crate::domain::DomainProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Extraction,
    Generation,
    Evaluation,
    Categorization,
    Visualization,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Extraction,
        Stage::Generation,
        Stage::Evaluation,
        Stage::Categorization,
        Stage::Visualization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extraction => "extraction",
            Stage::Generation => "generation",
            Stage::Evaluation => "evaluation",
            Stage::Categorization => "categorization",
            Stage::Visualization => "visualization",
        }
    }

    /// Temperature used when the configuration does not override it.
    pub fn default_temperature(self) -> f64 {
        match self {
            Stage::Generation => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Model and parameter settings feeding [`build_profile`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub primary_model: String,
    pub eval_model: String,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub temperature_overrides: BTreeMap<Stage, f64>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            primary_model: "gpt-4-1106-preview".into(),
            eval_model: "gemini-1.5-pro".into(),
            max_output_tokens: 4000,
            temperature_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: Stage,
    pub model_id: String,
    pub system_message: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub extra_params: BTreeMap<String, serde_json::Value>,
}

impl StageProfile {
    /// A single-turn request under this profile.
    pub fn request(&self, user_prompt: impl Into<String>) -> LlmRequest {
        LlmRequest {
            model_id: self.model_id.clone(),
            system_message: self.system_message.clone(),
            history: Vec::new(),
            user_prompt: user_prompt.into(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            extra_params: self.extra_params.clone(),
        }
    }
}

/// Per-stage request parameters: the domain system message, temperature 1.0
/// for generation and 0.0 elsewhere, and vendor-default extras. Evaluation
/// runs on the evaluation model with its own defaults.
pub fn build_profile(
    stage: Stage,
    domain: &DomainProfile,
    config: &ProfileConfig,
) -> Result<StageProfile> {
    if domain.system_message.trim().is_empty() {
        return Err(Error::Config(format!(
            "domain `{}` defines no system message",
            domain.name
        )));
    }
    let temperature = config
        .temperature_overrides
        .get(&stage)
        .copied()
        .unwrap_or_else(|| stage.default_temperature());
    if !(0.0..=2.0).contains(&temperature) {
        return Err(Error::Config(format!(
            "{stage} temperature {temperature} outside [0, 2]"
        )));
    }
    let (model_id, extra_params) = if stage == Stage::Evaluation {
        (
            config.eval_model.clone(),
            BTreeMap::from([
                ("top_k".to_string(), json!(64)),
                ("top_p".to_string(), json!(0.95)),
            ]),
        )
    } else {
        (
            config.primary_model.clone(),
            BTreeMap::from([
                ("frequency_penalty".to_string(), json!(0.0)),
                ("presence_penalty".to_string(), json!(0.0)),
                ("top_p".to_string(), json!(1.0)),
            ]),
        )
    };
    Ok(StageProfile {
        stage,
        model_id,
        system_message: domain.system_message.clone(),
        temperature,
        max_output_tokens: config.max_output_tokens,
        extra_params,
    })
}
