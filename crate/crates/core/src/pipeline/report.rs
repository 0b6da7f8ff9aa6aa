//! Run summary: the hypothesis funnel, token reduction, categorization loss,
//! audit metrics and the idea table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::categorization::{CoverageReport, Idea};
use crate::corpus::{CorpusStore, RunManifest};
use crate::evaluation::audit::AuditReport;
use crate::evaluation::{EvaluationRecord, GroundingLabel, SynergyLabel};
use crate::extraction::table::render_table;
use crate::extraction::SystemChart;
use crate::generation::Hypothesis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetCount {
    pub label: String,
    pub papers: usize,
    pub charts: usize,
    pub chart_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub domain: String,
    pub backend_id: String,
    pub sets: Vec<SetCount>,
    /// Body-text token estimate over papers that produced a chart.
    pub paper_tokens: usize,
    pub chart_tokens: usize,
    /// `paper_tokens / chart_tokens`; absent when no chart has content.
    pub reduction_factor: Option<f64>,
    pub hypotheses: usize,
    pub unevaluated: usize,
    pub synergistic: usize,
    pub strong: usize,
    pub strong_synergistic: usize,
    pub ideas: Vec<Idea>,
    pub coverage: CoverageReport,
    pub audit: Option<AuditReport>,
}

impl RunReport {
    pub fn funnel_line(&self) -> String {
        format!(
            "{} hypotheses → {} Strong∧Synergistic → {} ideas",
            self.hypotheses,
            self.strong_synergistic,
            self.ideas.len()
        )
    }
}

/// Everything a report is computed from, as read back from a run directory.
pub struct ReportInputs<'a> {
    pub manifest: &'a RunManifest,
    pub domain: &'a str,
    pub store: &'a CorpusStore,
    pub charts: &'a [SystemChart],
    pub hypotheses: &'a [Hypothesis],
    pub evaluations: &'a [EvaluationRecord],
    pub ideas: &'a [Idea],
    pub coverage: &'a CoverageReport,
    pub audit: Option<AuditReport>,
}

pub fn build_report(inputs: ReportInputs<'_>) -> RunReport {
    let ReportInputs {
        manifest,
        domain,
        store,
        charts,
        hypotheses,
        evaluations,
        ideas,
        coverage,
        audit,
    } = inputs;
    let sets = store
        .sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let in_set: Vec<&SystemChart> = charts
                .iter()
                .filter(|c| store.set_of(c.paper_id) == Some(i))
                .collect();
            SetCount {
                label: set.label.clone(),
                papers: set.paper_ids.len(),
                charts: in_set.len(),
                chart_rows: in_set.iter().map(|c| c.rows.len()).sum(),
            }
        })
        .collect();
    let paper_tokens = charts
        .iter()
        .filter_map(|c| store.paper(c.paper_id))
        .map(|p| p.token_estimate)
        .sum();
    let chart_tokens: usize = charts.iter().map(|c| c.chart_token_estimate).sum();
    let count = |f: &dyn Fn(&EvaluationRecord) -> bool| evaluations.iter().filter(|e| f(e)).count();
    RunReport {
        run_id: manifest.run_id.clone(),
        domain: domain.to_string(),
        backend_id: manifest.backend_id.clone(),
        sets,
        paper_tokens,
        chart_tokens,
        reduction_factor: (chart_tokens > 0).then(|| paper_tokens as f64 / chart_tokens as f64),
        hypotheses: hypotheses.len(),
        unevaluated: count(&|e| !e.is_evaluated()),
        synergistic: count(&|e| e.synergy_label() == Some(SynergyLabel::Synergistic)),
        strong: count(&|e| e.grounding_label() == Some(GroundingLabel::Strong)),
        strong_synergistic: count(&|e| e.is_strong_synergistic()),
        ideas: ideas.to_vec(),
        coverage: coverage.clone(),
        audit,
    }
}

pub const IDEA_TABLE_HEADER: [&str; 4] =
    ["Idea", "Hypotheses", "Structural entities", "Core concepts"];

pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Run {} ({} domain, backend {})",
        report.run_id, report.domain, report.backend_id
    );
    out.push('\n');
    for set in &report.sets {
        let _ = writeln!(
            out,
            "Set {}: {} papers, {} charts, {} chart rows",
            set.label, set.papers, set.charts, set.chart_rows
        );
    }
    match report.reduction_factor {
        Some(f) => {
            let _ = writeln!(
                out,
                "Token reduction: {} paper tokens → {} chart tokens (factor {f:.1})",
                report.paper_tokens, report.chart_tokens
            );
        }
        None => out.push_str("Token reduction: n/a (no chart content)\n"),
    }
    out.push('\n');
    let _ = writeln!(out, "Funnel: {}", report.funnel_line());
    let _ = writeln!(
        out,
        "Evaluated: {} synergistic, {} strong, {} unevaluated",
        report.synergistic, report.strong, report.unevaluated
    );
    let c = &report.coverage;
    let _ = writeln!(
        out,
        "Categorization: {} of {} pool hypotheses covered, {} dropped (loss fraction {:.2}); merge {}",
        c.covered,
        c.pool_size,
        c.dropped,
        c.loss_fraction,
        serde_json::to_value(c.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    );
    if let Some(audit) = &report.audit {
        out.push_str("\nAudit\n");
        if let Some(hmi) = audit.mean_hmi_percent {
            let _ = writeln!(
                out,
                "  Mean HMI: {hmi:.1}% over {} charts",
                audit.charts.len()
            );
        }
        if let Some(fid) = audit.mean_mechanism_fidelity {
            let _ = writeln!(out, "  Mean mechanism fidelity: {fid:.2}");
        }
        if let Some(m) = &audit.synergy {
            let _ = writeln!(out, "  Synergy: {}", m.summary());
        }
        if let Some(m) = &audit.grounding {
            let _ = writeln!(out, "  Grounding: {}", m.summary());
        }
    }
    out.push('\n');
    if report.ideas.is_empty() {
        out.push_str("No ideas.\n");
    } else {
        let rows: Vec<Vec<String>> = report
            .ideas
            .iter()
            .map(|idea| {
                vec![
                    idea.idea_id.to_string(),
                    idea.member_hypotheses
                        .iter()
                        .map(u32::to_string)
                        .collect::<Vec<_>>()
                        .join(", "),
                    idea.structural_entities.join("; "),
                    idea.core_concept.clone(),
                ]
            })
            .collect();
        out.push_str(&render_table(&IDEA_TABLE_HEADER, &rows));
    }
    out
}
