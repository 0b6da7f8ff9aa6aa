//! Human audit metrics: the machine-readability index of a chart, mechanism
//! scores, and confusion metrics comparing model labels with human labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvaluationRecord, GroundingLabel, SynergyLabel};
use crate::error::{Error, Result};

/// Points subtracted when the chart misses the paper's core idea.
pub const CORE_IDEA_PENALTY: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmiAudit {
    pub incorrect: u32,
    pub partially_correct: u32,
    pub correct: u32,
    pub total_actions: u32,
    pub core_idea_present: bool,
    pub hmi_percent: f64,
}

impl HmiAudit {
    pub fn new(
        incorrect: u32,
        partially_correct: u32,
        correct: u32,
        core_idea_present: bool,
    ) -> Result<Self> {
        Ok(Self {
            incorrect,
            partially_correct,
            correct,
            total_actions: incorrect + partially_correct + correct,
            core_idea_present,
            hmi_percent: compute_hmi(incorrect, partially_correct, correct, core_idea_present)?,
        })
    }
}

/// `100·(0·I + 0.5·PC + C)/A_T`, less 20 points when the core idea is
/// missing, floored at zero.
pub fn compute_hmi(
    incorrect: u32,
    partially_correct: u32,
    correct: u32,
    core_idea_present: bool,
) -> Result<f64> {
    let total = incorrect as u64 + partially_correct as u64 + correct as u64;
    if total == 0 {
        return Err(Error::Invalid(
            "HMI needs at least one judged action".into(),
        ));
    }
    let score = 100.0 * (0.5 * partially_correct as f64 + correct as f64) / total as f64;
    let penalized = if core_idea_present {
        score
    } else {
        score - CORE_IDEA_PENALTY
    };
    Ok(penalized.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismFlag {
    pub label_correct: bool,
    pub mechanistic_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismAudit {
    pub flags: Vec<MechanismFlag>,
    pub labeling_accuracy: f64,
    pub mechanistic_accuracy: f64,
    /// Fraction correct on both counts.
    pub fidelity: f64,
}

pub fn compute_mechanism_scores(flags: &[MechanismFlag]) -> Result<MechanismAudit> {
    if flags.is_empty() {
        return Err(Error::Invalid(
            "mechanism audit needs at least one mechanism".into(),
        ));
    }
    let n = flags.len() as f64;
    let frac =
        |f: &dyn Fn(&MechanismFlag) -> bool| flags.iter().filter(|m| f(m)).count() as f64 / n;
    Ok(MechanismAudit {
        flags: flags.to_vec(),
        labeling_accuracy: frac(&|m| m.label_correct),
        mechanistic_accuracy: frac(&|m| m.mechanistic_correct),
        fidelity: frac(&|m| m.label_correct && m.mechanistic_correct),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    /// `None` when the denominator is zero.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ConfusionMetrics {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `accuracy (0.79), precision (0.70), recall (0.83), and F1 (0.76)`.
    pub fn summary(&self) -> String {
        let show = |v: Option<f64>| match v {
            Some(v) => format!("{:.2}", round_half_up(v, 2)),
            None => "n/a".into(),
        };
        format!(
            "accuracy ({}), precision ({}), recall ({}), and F1 ({})",
            show(Some(self.accuracy)),
            show(self.precision),
            show(self.recall),
            show(self.f1)
        )
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall; undefined when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let sum = precision + recall;
    (sum > 0.0).then(|| 2.0 * precision * recall / sum)
}

pub fn confusion_metrics(tp: u64, fp: u64, fn_: u64, tn: u64) -> Result<ConfusionMetrics> {
    let total = tp + fp + fn_ + tn;
    if total == 0 {
        return Err(Error::Invalid(
            "confusion metrics need at least one item".into(),
        ));
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => f1_score(p, r),
        _ => None,
    };
    Ok(ConfusionMetrics {
        tp,
        fp,
        fn_,
        tn,
        accuracy: (tp + tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

/// Rounds halves away from zero at `decimals` places, tolerating the binary
/// representation error of values such as 0.125.
pub fn round_half_up(value: f64, decimals: u32) -> f64 {
    let factor = 10f64.powi(decimals as i32);
    let scaled = value * factor;
    let floor = scaled.floor();
    let rounded = if scaled - floor >= 0.5 - 1e-9 {
        floor + 1.0
    } else {
        floor
    };
    rounded / factor
}

/// Confusion counts with the human labels as ground truth. Both maps must
/// cover exactly the same hypothesis ids.
pub fn compare_with_human<L: PartialEq>(
    model: &BTreeMap<u32, L>,
    human: &BTreeMap<u32, L>,
    positive: &L,
) -> Result<ConfusionMetrics> {
    let missing_model: Vec<u32> = human
        .keys()
        .filter(|id| !model.contains_key(id))
        .copied()
        .collect();
    let missing_human: Vec<u32> = model
        .keys()
        .filter(|id| !human.contains_key(id))
        .copied()
        .collect();
    if !missing_model.is_empty() || !missing_human.is_empty() {
        return Err(Error::Invalid(format!(
            "label sets are misaligned: no model label for {missing_model:?}, no human label for {missing_human:?}"
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (id, truth) in human {
        let predicted = &model[id];
        match (predicted == positive, truth == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    confusion_metrics(tp, fp, fn_, tn)
}

/// One row of the annotations CSV.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct HumanAnnotation {
    pub hypothesis_id: u32,
    pub synergy_label: String,
    pub grounding_label: String,
}

pub fn read_annotations(path: &Path) -> Result<Vec<HumanAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let rows: Vec<HumanAnnotation> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for row in &rows {
        row.synergy_label.parse::<SynergyLabel>()?;
        row.grounding_label.parse::<GroundingLabel>()?;
        if !seen.insert(row.hypothesis_id) {
            return Err(Error::Invalid(format!(
                "hypothesis {} annotated twice",
                row.hypothesis_id
            )));
        }
    }
    Ok(rows)
}

/// Human inputs for one audited chart.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct ChartAuditInput {
    pub paper_id: u32,
    pub incorrect: u32,
    pub partially_correct: u32,
    pub correct: u32,
    pub core_idea_present: bool,
    pub mechanisms: Vec<MechanismFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartAuditResult {
    pub paper_id: u32,
    pub hmi: HmiAudit,
    pub mechanisms: MechanismAudit,
}

/// Contents of `audit.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub charts: Vec<ChartAuditResult>,
    pub mean_hmi_percent: Option<f64>,
    pub mean_mechanism_fidelity: Option<f64>,
    pub synergy: Option<ConfusionMetrics>,
    pub grounding: Option<ConfusionMetrics>,
}

pub fn audit_charts(inputs: &[ChartAuditInput]) -> Result<Vec<ChartAuditResult>> {
    inputs
        .iter()
        .map(|i| {
            Ok(ChartAuditResult {
                paper_id: i.paper_id,
                hmi: HmiAudit::new(
                    i.incorrect,
                    i.partially_correct,
                    i.correct,
                    i.core_idea_present,
                )?,
                mechanisms: compute_mechanism_scores(&i.mechanisms)
                    .map_err(|e| Error::Invalid(format!("paper {}: {e}", i.paper_id)))?,
            })
        })
        .collect()
}

/// Model-vs-human metrics for synergy and grounding over the annotated ids.
pub fn audit_labels(
    annotations: &[HumanAnnotation],
    evaluations: &[EvaluationRecord],
) -> Result<(ConfusionMetrics, ConfusionMetrics)> {
    let by_id: BTreeMap<u32, &EvaluationRecord> =
        evaluations.iter().map(|r| (r.hypothesis_id, r)).collect();
    let mut human_syn = BTreeMap::new();
    let mut human_gr = BTreeMap::new();
    let mut model_syn = BTreeMap::new();
    let mut model_gr = BTreeMap::new();
    for a in annotations {
        human_syn.insert(a.hypothesis_id, a.synergy_label.parse::<SynergyLabel>()?);
        human_gr.insert(
            a.hypothesis_id,
            a.grounding_label.parse::<GroundingLabel>()?,
        );
        if let Some(r) = by_id.get(&a.hypothesis_id) {
            if let Some(l) = r.synergy_label() {
                model_syn.insert(a.hypothesis_id, l);
            }
            if let Some(l) = r.grounding_label() {
                model_gr.insert(a.hypothesis_id, l);
            }
        }
    }
    Ok((
        compare_with_human(&model_syn, &human_syn, &SynergyLabel::Synergistic)?,
        compare_with_human(&model_gr, &human_gr, &GroundingLabel::Strong)?,
    ))
}

pub fn build_audit_report(
    charts: &[ChartAuditInput],
    annotations: &[HumanAnnotation],
    evaluations: &[EvaluationRecord],
) -> Result<AuditReport> {
    let charts = audit_charts(charts)?;
    let mean = |values: Vec<f64>| {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    let (synergy, grounding) = if annotations.is_empty() {
        (None, None)
    } else {
        let (s, g) = audit_labels(annotations, evaluations)?;
        (Some(s), Some(g))
    };
    Ok(AuditReport {
        mean_hmi_percent: mean(charts.iter().map(|c| c.hmi.hmi_percent).collect()),
        mean_mechanism_fidelity: mean(charts.iter().map(|c| c.mechanisms.fidelity).collect()),
        charts,
        synergy,
        grounding,
    })
}
