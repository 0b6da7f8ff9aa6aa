//! Domain profiles: the research field a run targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    /// Sent verbatim as the system message of every stage.
    pub system_message: String,
    /// One-line statement of the materials design goal, embedded in prompts.
    pub design_goal: String,
    /// What a hypothesis must invoke to be judged Strong.
    pub grounding_criterion: String,
    /// Ask generation for a single compound rather than a composite.
    #[serde(default)]
    pub compound_mode: bool,
}

pub const ALLOY_SYSTEM_MESSAGE: &str =
    "You are an expert in the alloy field of Materials Science and Engineering";
pub const BATTERY_SYSTEM_MESSAGE: &str =
    "You possess expertise in the field of all-solid-state Lithium battery research";

impl DomainProfile {
    pub fn cryogenic_hea() -> Self {
        Self {
            name: "cryogenic-hea".into(),
            system_message: ALLOY_SYSTEM_MESSAGE.into(),
            design_goal: "high entropy alloys with superior mechanical properties at cryogenic temperatures".into(),
            grounding_criterion: "The hypothesis explicitly harnesses phenomena or mechanisms specific to cryogenic conditions \
                (for example temperature-dependent stacking fault energy, twinning activation or phase stability at low temperature). \
                A hypothesis that lacks this cryogenic specificity is Weak."
                .into(),
            compound_mode: false,
        }
    }

    pub fn halide_se() -> Self {
        Self {
            name: "halide-se".into(),
            system_message: BATTERY_SYSTEM_MESSAGE.into(),
            design_goal: "halide solid electrolytes with high ionic conductivity and superior formability/malleability".into(),
            grounding_criterion: "The hypothesis incorporates mechanisms that contribute to formability/malleability \
                (for example viscous flow, low glass transition temperature or plastic deformability of the lattice). \
                A hypothesis without such mechanisms is Weak."
                .into(),
            compound_mode: true,
        }
    }

    /// Looks up a built-in profile by name. `alloy` and `battery` are accepted as aliases.
    pub fn builtin(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "cryogenic-hea" | "alloy" => Ok(Self::cryogenic_hea()),
            "halide-se" | "battery" => Ok(Self::halide_se()),
            other => Err(Error::Config(format!(
                "unknown domain profile `{other}` (expected cryogenic-hea or halide-se)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.system_message.trim().is_empty() {
            return Err(Error::Config(format!(
                "domain `{}` has no system message",
                self.name
            )));
        }
        if self.grounding_criterion.trim().is_empty() {
            return Err(Error::Config(format!(
                "domain `{}` has no grounding criterion",
                self.name
            )));
        }
        Ok(())
    }
}
