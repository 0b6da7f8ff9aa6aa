//! Model-side hypothesis evaluation: a 1–5 synergy score and a Strong/Weak
//! grounding judgment, each parsed from a fixed reply format with one repair
//! reprompt. The audit mathematics live in [`audit`].

pub mod audit;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::DomainProfile;
use crate::error::{Error, Result};
use crate::extraction::complete_with_repair;
use crate::gateway::{Gateway, StageProfile};
use crate::generation::{split_list, Hypothesis};
use crate::Warned;

pub use audit::{
    compare_with_human, compute_hmi, compute_mechanism_scores, confusion_metrics, f1_score,
    round_half_up, ConfusionMetrics, HmiAudit, MechanismAudit, MechanismFlag,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynergyLabel {
    Synergistic,
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroundingLabel {
    Strong,
    Weak,
}

impl fmt::Display for SynergyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynergyLabel::Synergistic => "Synergistic",
            SynergyLabel::Additive => "Additive",
        })
    }
}

impl fmt::Display for GroundingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroundingLabel::Strong => "Strong",
            GroundingLabel::Weak => "Weak",
        })
    }
}

impl FromStr for SynergyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "synergistic" => Ok(SynergyLabel::Synergistic),
            "additive" => Ok(SynergyLabel::Additive),
            other => Err(Error::Parse(format!("unknown synergy label `{other}`"))),
        }
    }
}

impl FromStr for GroundingLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strong" => Ok(GroundingLabel::Strong),
            "weak" => Ok(GroundingLabel::Weak),
            other => Err(Error::Parse(format!("unknown grounding label `{other}`"))),
        }
    }
}

/// Scores above 3 are synergistic.
pub fn classify_synergy(score: u8) -> Result<SynergyLabel> {
    match score {
        4 | 5 => Ok(SynergyLabel::Synergistic),
        1..=3 => Ok(SynergyLabel::Additive),
        _ => Err(Error::Invalid(format!(
            "synergy score {score} outside 1..5"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynergyEvaluation {
    pub hypothesis_id: u32,
    pub score: u8,
    pub label: SynergyLabel,
    pub interdependence_sentences: Vec<String>,
    pub core_structures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingEvaluation {
    pub hypothesis_id: u32,
    pub label: GroundingLabel,
    pub rationale: String,
}

/// A judgment that could not be parsed even after the repair reprompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unevaluated {
    pub digest: String,
    pub reason: String,
}

/// One line of `evaluations.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub hypothesis_id: u32,
    pub synergy: Option<SynergyEvaluation>,
    pub grounding: Option<GroundingEvaluation>,
    /// Reasons the hypothesis is excluded downstream; empty when fully evaluated.
    #[serde(default)]
    pub unevaluated: Vec<String>,
}

impl EvaluationRecord {
    pub fn is_evaluated(&self) -> bool {
        self.synergy.is_some() && self.grounding.is_some()
    }

    pub fn synergy_label(&self) -> Option<SynergyLabel> {
        self.synergy.as_ref().map(|s| s.label)
    }

    pub fn grounding_label(&self) -> Option<GroundingLabel> {
        self.grounding.as_ref().map(|g| g.label)
    }

    /// Member of the pool passed to categorization.
    pub fn is_strong_synergistic(&self) -> bool {
        self.synergy_label() == Some(SynergyLabel::Synergistic)
            && self.grounding_label() == Some(GroundingLabel::Strong)
    }
}

pub fn synergy_prompt(h: &Hypothesis) -> String {
    format!(
        "Evaluate whether the hypothesis below is Synergistic or Additive.\n\
         A hypothesis is Synergistic when it generates an interdependence between the two combined mechanisms, \
         or when the combined action of the two mechanisms influences or creates a specific structure. \
         It is Additive when the mechanisms act side by side without any direct interaction or interdependence.\n\
         Score the hypothesis on a 1 to 5 scale, where 5 is clearly synergistic and 1 is purely additive.\n\n\
         Hypothesis:\n{text}\n\n\
         Reply in exactly this format:\n\
         Score: <integer 1-5>\n\
         Interdependence sentences:\n\
         - \"<sentence quoted verbatim from the hypothesis that shows the interdependence>\"\n\
         Core structures: <structure>; <structure>\n\
         List no sentences when the hypothesis is additive.",
        text = h.text
    )
}

pub fn grounding_prompt(h: &Hypothesis, domain: &DomainProfile) -> String {
    format!(
        "Assess the scientific grounding of the hypothesis below against the design goal: {goal}.\n\
         Criterion: {criterion}\n\n\
         Hypothesis:\n{text}\n\n\
         Reply in exactly this format:\n\
         Grounding: <Strong or Weak>\n\
         Rationale: <one or two sentences>",
        goal = domain.design_goal,
        criterion = domain.grounding_criterion,
        text = h.text
    )
}

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[ \t]*score[ \t]*:[ \t]*(\S+?)[ \t]*(?:/[ \t]*5)?[ \t]*$").unwrap()
    })
}

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""([^"\n]+)"|“([^”\n]+)”"#).unwrap())
}

fn core_structures_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*core structures[ \t]*:(.*)$").unwrap())
}

fn grounding_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[ \t]*grounding[ \t]*:[ \t]*(\S+?)[ \t]*\.?[ \t]*$").unwrap()
    })
}

fn rationale_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)^[ \t]*rationale[ \t]*:(.*)\z").unwrap())
}

/// Parses the synergy reply format. The score must sit on its own
/// `Score: <n>` line; a synergistic score with no quoted sentence is rejected.
pub fn parse_synergy_reply(
    raw: &str,
    hypothesis_id: u32,
) -> std::result::Result<SynergyEvaluation, String> {
    let scores: Vec<&str> = score_re()
        .captures_iter(raw)
        .map(|c| c.get(1).unwrap().as_str())
        .collect();
    let score_text = match scores.as_slice() {
        [] => return Err("no `Score: <integer>` line".into()),
        [one] => *one,
        [first, rest @ ..] if rest.iter().all(|s| s == first) => *first,
        _ => return Err("conflicting `Score:` lines".into()),
    };
    let score: u8 = score_text
        .parse()
        .map_err(|_| format!("score `{score_text}` is not an integer"))?;
    let label = classify_synergy(score).map_err(|e| e.to_string())?;

    let sentences_start = raw
        .to_ascii_lowercase()
        .find("interdependence sentences")
        .unwrap_or(0);
    let section = &raw[sentences_start..];
    let section_end = core_structures_re()
        .find(section)
        .map(|m| m.start())
        .unwrap_or(section.len());
    let interdependence_sentences: Vec<String> = quoted_re()
        .captures_iter(&section[..section_end])
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if label == SynergyLabel::Synergistic && interdependence_sentences.is_empty() {
        return Err(format!(
            "score {score} is synergistic but no interdependence sentence is quoted"
        ));
    }
    let core_structures = core_structures_re()
        .captures(raw)
        .map(|c| split_list(&c[1]))
        .unwrap_or_default();
    Ok(SynergyEvaluation {
        hypothesis_id,
        score,
        label,
        interdependence_sentences,
        core_structures,
    })
}

pub fn parse_grounding_reply(
    raw: &str,
    hypothesis_id: u32,
) -> std::result::Result<GroundingEvaluation, String> {
    let caps = grounding_re()
        .captures(raw)
        .ok_or_else(|| "no `Grounding: Strong|Weak` line".to_string())?;
    let label: GroundingLabel = caps[1]
        .trim_matches('*')
        .parse()
        .map_err(|e: Error| e.to_string())?;
    let after = &raw[caps.get(0).unwrap().end()..];
    let rationale = after
        .lines()
        .position(|l| l.trim_start().to_ascii_lowercase().starts_with("rationale"))
        .map(|i| after.lines().skip(i).collect::<Vec<_>>().join("\n"))
        .and_then(|tail| {
            rationale_re()
                .captures(&tail)
                .map(|c| c[1].trim().to_string())
        })
        .unwrap_or_else(|| after.trim().to_string());
    Ok(GroundingEvaluation {
        hypothesis_id,
        label,
        rationale,
    })
}

fn repair_prompt(error: &str, format: &str) -> String {
    format!("Your previous reply could not be parsed: {error}. Reply again using exactly this format:\n{format}")
}

const SYNERGY_FORMAT: &str = "Score: <integer 1-5>\nInterdependence sentences:\n- \"<verbatim sentence>\"\nCore structures: <structure>; <structure>";
const GROUNDING_FORMAT: &str = "Grounding: <Strong or Weak>\nRationale: <one or two sentences>";

pub fn evaluate_synergy(
    h: &Hypothesis,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<std::result::Result<SynergyEvaluation, Unevaluated>> {
    let outcome = complete_with_repair(
        gateway,
        profile.request(synergy_prompt(h)),
        |raw| parse_synergy_reply(raw, h.hypothesis_id),
        |e| repair_prompt(e, SYNERGY_FORMAT),
    )?;
    Ok(outcome.map_err(|(digest, reason)| Unevaluated { digest, reason }))
}

pub fn evaluate_grounding(
    h: &Hypothesis,
    domain: &DomainProfile,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<std::result::Result<GroundingEvaluation, Unevaluated>> {
    let outcome = complete_with_repair(
        gateway,
        profile.request(grounding_prompt(h, domain)),
        |raw| parse_grounding_reply(raw, h.hypothesis_id),
        |e| repair_prompt(e, GROUNDING_FORMAT),
    )?;
    Ok(outcome.map_err(|(digest, reason)| Unevaluated { digest, reason }))
}

/// Runs both judgments for one hypothesis.
pub fn evaluate_hypothesis(
    h: &Hypothesis,
    domain: &DomainProfile,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<EvaluationRecord>> {
    let mut record = EvaluationRecord {
        hypothesis_id: h.hypothesis_id,
        synergy: None,
        grounding: None,
        unevaluated: Vec::new(),
    };
    let mut warnings = Vec::new();
    match evaluate_synergy(h, profile, gateway)? {
        Ok(s) => record.synergy = Some(s),
        Err(u) => {
            warnings.push(format!(
                "hypothesis {}: synergy unevaluated ({}, request {})",
                h.hypothesis_id, u.reason, u.digest
            ));
            record.unevaluated.push(format!("synergy: {}", u.reason));
        }
    }
    match evaluate_grounding(h, domain, profile, gateway)? {
        Ok(g) => record.grounding = Some(g),
        Err(u) => {
            warnings.push(format!(
                "hypothesis {}: grounding unevaluated ({}, request {})",
                h.hypothesis_id, u.reason, u.digest
            ));
            record.unevaluated.push(format!("grounding: {}", u.reason));
        }
    }
    Ok(Warned::with_warnings(record, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{build_profile, ProfileConfig, ScriptedBackend, ScriptedRule, Stage};
    use crate::generation::{RowPair, RowRef};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn hypothesis(id: u32, text: &str) -> Hypothesis {
        Hypothesis {
            hypothesis_id: id,
            pair: RowPair {
                pair_id: 1,
                a: RowRef {
                    paper_id: 1,
                    row_index: 1,
                },
                b: RowRef {
                    paper_id: 2,
                    row_index: 1,
                },
            },
            text: text.into(),
            cited_papers: vec![1, 2],
            combined_structures: vec![],
        }
    }

    fn eval_profile() -> StageProfile {
        build_profile(
            Stage::Evaluation,
            &DomainProfile::cryogenic_hea(),
            &ProfileConfig::default(),
        )
        .unwrap()
    }

    const H29: &str = "At cryogenic temperatures, the mechanical properties of HEAs are significantly altered due to the \
        increased activity of twinning and the formation of stacking faults... At cryogenic temperatures, the resistance to \
        dislocation movement due to precipitates can induce a higher stress threshold for dislocation glide, which favors \
        twinning as an alternative deformation mechanism.";
    const H189: &str = "Coherent nanoprecipitates effectively block dislocations and impart high yield strength, while \
        deformation-induced stacking faults allow for accommodating plastic deformation.";

    #[test]
    fn classify_thresholds() {
        assert_eq!(classify_synergy(4).unwrap(), SynergyLabel::Synergistic);
        assert_eq!(classify_synergy(5).unwrap(), SynergyLabel::Synergistic);
        assert_eq!(classify_synergy(3).unwrap(), SynergyLabel::Additive);
        assert_eq!(classify_synergy(1).unwrap(), SynergyLabel::Additive);
        assert!(classify_synergy(0).is_err());
        assert!(classify_synergy(6).is_err());
    }

    #[test]
    fn score_four_with_one_sentence() {
        let raw = "Score: 4\nInterdependence sentences:\n- \"GDSs serve as nucleation sites for SFs.\"\nCore structures: GDSs; stacking faults";
        let s = parse_synergy_reply(raw, 7).unwrap();
        assert_eq!(s.label, SynergyLabel::Synergistic);
        assert_eq!(
            s.interdependence_sentences,
            vec!["GDSs serve as nucleation sites for SFs."]
        );
        assert_eq!(s.core_structures, vec!["GDSs", "stacking faults"]);
        assert_eq!(s.hypothesis_id, 7);
    }

    #[test]
    fn strict_score_line() {
        assert!(parse_synergy_reply("I would give this a 4 out of 5.", 1).is_err());
        assert!(parse_synergy_reply("Score: four", 1).is_err());
        assert!(parse_synergy_reply("Score: 7", 1).is_err());
        assert!(parse_synergy_reply("Score: 2\nScore: 5", 1).is_err());
        assert!(parse_synergy_reply("Score: 5\n(no sentences)", 1).is_err());
        let additive = parse_synergy_reply(
            "Score: 2/5\nInterdependence sentences:\nCore structures: precipitates",
            1,
        )
        .unwrap();
        assert_eq!(additive.label, SynergyLabel::Additive);
        assert!(additive.interdependence_sentences.is_empty());
    }

    #[test]
    fn grounding_reply_parses() {
        let g = parse_grounding_reply(
            "Grounding: Strong\nRationale: invokes twinning activation at 77 K.",
            3,
        )
        .unwrap();
        assert_eq!(g.label, GroundingLabel::Strong);
        assert_eq!(g.rationale, "invokes twinning activation at 77 K.");
        let weak = parse_grounding_reply("Grounding: weak.\nnothing cryogenic here", 3).unwrap();
        assert_eq!(weak.label, GroundingLabel::Weak);
        assert_eq!(weak.rationale, "nothing cryogenic here");
        assert!(parse_grounding_reply("Grounding: Moderate", 3).is_err());
        assert!(parse_grounding_reply("Strong.", 3).is_err());
    }

    fn exemplar_gateway() -> (Arc<ScriptedBackend>, Gateway) {
        let backend = Arc::new(ScriptedBackend::from_rules(vec![
            ScriptedRule::new(
                &["favors twinning as an alternative", "Synergistic or Additive"],
                "Score: 5\nInterdependence sentences:\n- \"the resistance to dislocation movement due to precipitates can induce a \
                 higher stress threshold for dislocation glide, which favors twinning as an alternative deformation mechanism.\"\n\
                 Core structures: precipitates; twins",
            ),
            ScriptedRule::new(&["Coherent nanoprecipitates", "Synergistic or Additive"], "Score: 2\nInterdependence sentences:\nCore structures: precipitates; stacking faults"),
            ScriptedRule::new(&["favors twinning", "Grounding"], "Grounding: Strong\nRationale: increased activity of twinning at cryogenic temperature."),
            ScriptedRule::new(&["Coherent nanoprecipitates", "Grounding"], "Grounding: Weak\nRationale: lacks this specificity."),
        ]));
        (backend.clone(), Gateway::new(backend))
    }

    #[test]
    fn strong_synergistic_exemplar() {
        let (_, gw) = exemplar_gateway();
        let r = evaluate_hypothesis(
            &hypothesis(29, H29),
            &DomainProfile::cryogenic_hea(),
            &eval_profile(),
            &gw,
        )
        .unwrap()
        .value;
        assert_eq!(r.synergy.as_ref().unwrap().score, 5);
        assert_eq!(r.synergy_label(), Some(SynergyLabel::Synergistic));
        assert_eq!(r.grounding_label(), Some(GroundingLabel::Strong));
        assert!(r.is_strong_synergistic());
    }

    #[test]
    fn weak_additive_exemplar() {
        let (_, gw) = exemplar_gateway();
        let r = evaluate_hypothesis(
            &hypothesis(189, H189),
            &DomainProfile::cryogenic_hea(),
            &eval_profile(),
            &gw,
        )
        .unwrap()
        .value;
        assert!(r.synergy.as_ref().unwrap().score <= 3);
        assert_eq!(r.synergy_label(), Some(SynergyLabel::Additive));
        assert_eq!(r.grounding_label(), Some(GroundingLabel::Weak));
        assert!(!r.is_strong_synergistic());
    }

    #[test]
    fn halide_grounding_prompt_carries_criterion() {
        let backend = Arc::new(ScriptedBackend::from_rules(vec![ScriptedRule::new(
            &["formability/malleability", "viscous flow"],
            "Grounding: Strong\nRationale: viscous flow contributes to formability.",
        )]));
        let gw = Gateway::new(backend);
        let domain = DomainProfile::halide_se();
        let profile = build_profile(Stage::Evaluation, &domain, &ProfileConfig::default()).unwrap();
        let h = hypothesis(
            3,
            "A deep-eutectic glassy phase deforms by viscous flow [2].",
        );
        let g = evaluate_grounding(&h, &domain, &profile, &gw)
            .unwrap()
            .unwrap();
        assert_eq!(g.label, GroundingLabel::Strong);
    }

    #[test]
    fn reprompt_repairs_format_drift() {
        let backend = Arc::new(ScriptedBackend::from_rules(vec![
            ScriptedRule::new(
                &["could not be parsed"],
                "Score: 4\nInterdependence sentences:\n- \"x drives y\"\nCore structures: s",
            ),
            ScriptedRule::new(&["Synergistic or Additive"], "I'd say about four."),
        ]));
        let gw = Gateway::new(backend.clone());
        let s = evaluate_synergy(&hypothesis(1, "x drives y"), &eval_profile(), &gw)
            .unwrap()
            .unwrap();
        assert_eq!(s.score, 4);
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn second_failure_marks_unevaluated() {
        let backend = Arc::new(ScriptedBackend::from_rules(vec![
            ScriptedRule::new(&["Grounding"], "Grounding: Strong\nRationale: ok"),
            ScriptedRule::new(&[], "no idea"),
        ]));
        let gw = Gateway::new(backend.clone());
        let out = evaluate_hypothesis(
            &hypothesis(9, "text"),
            &DomainProfile::cryogenic_hea(),
            &eval_profile(),
            &gw,
        )
        .unwrap();
        let r = out.value;
        assert!(r.synergy.is_none());
        assert!(r.grounding.is_some());
        assert!(!r.is_evaluated());
        assert!(!r.is_strong_synergistic());
        assert_eq!(r.unevaluated.len(), 1);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(backend.call_count(), 3);
    }

    #[test]
    fn record_round_trips_as_json_line() {
        let r = EvaluationRecord {
            hypothesis_id: 4,
            synergy: Some(parse_synergy_reply("Score: 1", 4).unwrap()),
            grounding: Some(parse_grounding_reply("Grounding: Weak\nRationale: r", 4).unwrap()),
            unevaluated: vec![],
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(serde_json::from_str::<EvaluationRecord>(&line).unwrap(), r);
    }

    proptest! {
        #[test]
        fn classify_is_monotone(s in 1u8..=5, t in 1u8..=5) {
            if s <= t && classify_synergy(s).unwrap() == SynergyLabel::Synergistic {
                prop_assert_eq!(classify_synergy(t).unwrap(), SynergyLabel::Synergistic);
            }
        }

        #[test]
        fn parsed_synergy_respects_invariants(score in 0u8..8, quoted in proptest::option::of("[a-z ]{1,20}")) {
            let mut raw = format!("Score: {score}\nInterdependence sentences:\n");
            if let Some(q) = &quoted {
                raw.push_str(&format!("- \"{q}\"\n"));
            }
            if let Ok(s) = parse_synergy_reply(&raw, 1) {
                prop_assert!((1..=5).contains(&s.score));
                prop_assert_eq!(s.label == SynergyLabel::Synergistic, s.score > 3);
                if s.label == SynergyLabel::Synergistic {
                    prop_assert!(!s.interdependence_sentences.is_empty());
                }
            }
        }
    }
}
