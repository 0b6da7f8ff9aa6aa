//! Per-paper system chart extraction.
//!
//! Extraction is anchored on structures. The first conversation asks for the
//! target properties, then the structures relevant to them, then the
//! mechanisms linking each structure to its property (sub-table 1). A second
//! conversation asks, per structure, for the processing that achieves it and
//! the mechanism involved (sub-table 2). Joining the two on structure gives
//! one processing-mechanism-structure-mechanism-property row per structure.

pub mod table;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{token_estimate, PaperRecord};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, LlmRequest, StageProfile};
use crate::Warned;
use table::{parse_chart_table, render_table, TableError};

/// Placeholder for a missing processing or property.
pub const NA: &str = "N/A";

pub fn is_na(text: &str) -> bool {
    matches!(
        text.trim().to_ascii_lowercase().as_str(),
        "n/a" | "na" | "none" | "-" | ""
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismSource {
    FromText,
    FromKnowledgeBase,
}

impl MechanismSource {
    pub fn label(self) -> &'static str {
        match self {
            MechanismSource::FromText => "From text",
            MechanismSource::FromKnowledgeBase => "From knowledge base",
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            MechanismSource::FromText => "(From text)",
            MechanismSource::FromKnowledgeBase => "(From knowledge base)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanism {
    pub text: String,
    pub source: MechanismSource,
}

impl Mechanism {
    pub fn from_text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: MechanismSource::FromText,
        }
    }

    pub fn from_knowledge_base(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: MechanismSource::FromKnowledgeBase,
        }
    }

    fn missing_processing() -> Self {
        Self::from_knowledge_base("no processing route reported in the paper")
    }

    /// `text (From ...)`, the form used in tables.
    pub fn labeled(&self) -> String {
        if self.text.is_empty() {
            self.source.suffix().to_string()
        } else {
            format!("{} {}", self.text, self.source.suffix())
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labeled())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartRow {
    pub row_index: u32,
    pub processing: String,
    pub mech_ps: Mechanism,
    pub structure: String,
    pub mech_sp: Mechanism,
    pub property: String,
}

impl ChartRow {
    pub fn cells(&self) -> Vec<String> {
        vec![
            self.processing.clone(),
            self.mech_ps.labeled(),
            self.structure.clone(),
            self.mech_sp.labeled(),
            self.property.clone(),
        ]
    }

    /// One-line `P → M → S → M → P` rendering for prompts.
    pub fn linearized(&self) -> String {
        format!(
            "Processing: {} → Mechanism: {} → Structure: {} → Mechanism: {} → Property: {}",
            self.processing,
            self.mech_ps.labeled(),
            self.structure,
            self.mech_sp.labeled(),
            self.property
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemChart {
    pub paper_id: u32,
    pub rows: Vec<ChartRow>,
    pub chart_token_estimate: usize,
}

impl SystemChart {
    pub fn new(paper_id: u32, rows: Vec<ChartRow>) -> Self {
        let chart_token_estimate = token_estimate(&render_chart(&rows));
        Self {
            paper_id,
            rows,
            chart_token_estimate,
        }
    }

    pub fn row(&self, row_index: u32) -> Option<&ChartRow> {
        self.rows.iter().find(|r| r.row_index == row_index)
    }
}

pub const CHART_HEADER: [&str; 5] = [
    "Processing",
    "Mechanism (Processing→Structure)",
    "Structure",
    "Mechanism (Structure→Property)",
    "Property",
];

/// Pipe-table rendering of chart rows; the inverse of [`parse_chart_rows`].
pub fn render_chart(rows: &[ChartRow]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(ChartRow::cells).collect();
    render_table(&CHART_HEADER, &cells)
}

/// Parses a five-column chart table back into rows numbered from 1.
pub fn parse_chart_rows(raw: &str) -> Result<Warned<Vec<ChartRow>>, TableError> {
    let mut warnings = Vec::new();
    let rows = parse_chart_table(raw, 5)?
        .iter()
        .enumerate()
        .map(|(i, cells)| ChartRow {
            row_index: i as u32 + 1,
            processing: cells[0].text.clone(),
            mech_ps: cells[1].to_mechanism(i + 1, &mut warnings),
            structure: cells[2].text.clone(),
            mech_sp: cells[3].to_mechanism(i + 1, &mut warnings),
            property: cells[4].text.clone(),
        })
        .collect();
    Ok(Warned::with_warnings(rows, warnings))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyLink {
    pub property: String,
    pub mech_sp: Mechanism,
    pub structure: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SubTable1 {
    pub links: Vec<PropertyLink>,
}

impl SubTable1 {
    /// Distinct structures in first-appearance order.
    pub fn structures(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.links
            .iter()
            .filter(|l| seen.insert(structure_key(&l.structure)))
            .map(|l| l.structure.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessingLink {
    pub structure: String,
    pub mech_ps: Mechanism,
    pub processing: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SubTable2 {
    pub links: Vec<ProcessingLink>,
}

/// Join key for structures: trimmed and case-folded.
pub fn structure_key(structure: &str) -> String {
    structure.trim().to_lowercase()
}

fn paper_block(paper: &PaperRecord) -> String {
    format!(
        "Paper title: {}\nVenue: {} ({})\n\n<paper>\n{}\n</paper>",
        paper.title,
        paper.venue,
        paper.year,
        paper.body_text.trim()
    )
}

const SOURCE_RULE: &str = "Label every mechanism with its source: append \"(From text)\" when the paper states it, \
or \"(From knowledge base)\" when you supply it from your own knowledge because the paper does not state it.";

const TABLE_RULE: &str =
    "Reply with a pipe-delimited table only, one row per line, with exactly the columns listed. \
Do not merge cells or add commentary inside the table.";

fn properties_prompt(paper: &PaperRecord) -> String {
    format!(
        "System chart extraction, step 1 of 3.\n{}\n\nList the target properties this paper sets out to achieve or \
         improve, one per line, with any qualifier (temperature, environment, loading).",
        paper_block(paper)
    )
}

const STRUCTURES_PROMPT: &str = "System chart extraction, step 2 of 3.\nList the (micro)structures reported in the paper \
that are relevant to achieving these properties, one per line. Each structure must be a distinct structural entity.";

fn mechanisms_prompt() -> String {
    format!(
        "System chart extraction, step 3 of 3.\nFor each structure, give the mechanism by which it produces its target \
         property. {SOURCE_RULE}\n{TABLE_RULE}\nColumns: | Property | Mechanism (Structure→Property) | Structure |"
    )
}

fn processing_prompt(paper: &PaperRecord, structures: &[String]) -> String {
    let list: String = structures
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}\n", i + 1))
        .collect();
    format!(
        "System chart extraction, sub-table 2.\n{}\n\nFor each of the following predetermined structures, extract the \
         processing method (with key parameters) important for achieving it and the mechanism by which the processing \
         produces the structure. Write N/A as the processing when the paper reports none. If several processing routes \
         produce one structure, give each on its own row.\n{SOURCE_RULE}\n{TABLE_RULE}\n\
         Columns: | Structure | Mechanism (Processing→Structure) | Processing |\n\nStructures:\n{list}",
        paper_block(paper)
    )
}

fn repair_prompt(error: &str, columns: &str) -> String {
    format!(
        "Your previous reply could not be parsed: {error}. Reply again with only the pipe-delimited table, \
         columns {columns}, keeping the source labels on mechanisms."
    )
}

/// Sends `request`, parses the reply with `parse`, and on failure reprompts
/// once with the parser's error appended. Returns the parsed value and the
/// digest of the last request.
pub(crate) fn complete_with_repair<T>(
    gateway: &Gateway,
    request: LlmRequest,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
    repair: impl Fn(&str) -> String,
) -> Result<std::result::Result<T, (String, String)>> {
    let reply = gateway.complete(&request)?;
    match parse(&reply.text) {
        Ok(value) => Ok(Ok(value)),
        Err(first) => {
            let retry = request.follow_up(&reply.text, repair(&first));
            let digest = retry.digest();
            let reply = gateway.complete(&retry)?;
            Ok(parse(&reply.text).map_err(|e| (digest, e)))
        }
    }
}

/// Properties, then structures, then structure→property mechanisms.
pub fn extract_subtable1(
    paper: &PaperRecord,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<SubTable1>> {
    if paper.body_text.trim().is_empty() {
        return Err(Error::Invalid(format!(
            "paper {} has an empty body",
            paper.paper_id
        )));
    }
    let first = profile.request(properties_prompt(paper));
    let properties = gateway.complete(&first)?;
    let second = first.follow_up(&properties.text, STRUCTURES_PROMPT);
    let structures = gateway.complete(&second)?;
    let third = second.follow_up(&structures.text, mechanisms_prompt());

    let parsed = complete_with_repair(
        gateway,
        third,
        |raw| parse_chart_table(raw, 3).map_err(|e| e.to_string()),
        |e| {
            repair_prompt(
                e,
                "| Property | Mechanism (Structure→Property) | Structure |",
            )
        },
    )?;
    let rows = parsed.map_err(|(digest, reason)| Error::Extraction {
        paper_id: paper.paper_id,
        digest,
        reason,
    })?;
    let mut warnings = Vec::new();
    let mut links = Vec::new();
    for (i, cells) in rows.iter().enumerate() {
        let structure = cells[2].text.clone();
        if structure.is_empty() || is_na(&structure) {
            warnings.push(format!(
                "paper {}: sub-table 1 row {} has no structure, skipped",
                paper.paper_id,
                i + 1
            ));
            continue;
        }
        links.push(PropertyLink {
            property: cells[0].text.clone(),
            mech_sp: cells[1].to_mechanism(i + 1, &mut warnings),
            structure,
        });
    }
    if links.is_empty() {
        return Err(Error::Extraction {
            paper_id: paper.paper_id,
            digest: String::new(),
            reason: "no rows parsed".into(),
        });
    }
    Ok(Warned::with_warnings(SubTable1 { links }, warnings))
}

/// Processing and processing→structure mechanism for each given structure.
pub fn extract_subtable2(
    paper: &PaperRecord,
    structures: &[String],
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<SubTable2>> {
    if structures.is_empty() {
        return Err(Error::Invalid(format!(
            "paper {}: no structures to anchor sub-table 2",
            paper.paper_id
        )));
    }
    let request = profile.request(processing_prompt(paper, structures));
    let parsed = complete_with_repair(
        gateway,
        request,
        |raw| parse_chart_table(raw, 3).map_err(|e| e.to_string()),
        |e| {
            repair_prompt(
                e,
                "| Structure | Mechanism (Processing→Structure) | Processing |",
            )
        },
    )?;
    let rows = parsed.map_err(|(digest, reason)| Error::Extraction {
        paper_id: paper.paper_id,
        digest,
        reason,
    })?;

    let mut warnings = Vec::new();
    let mut by_key: HashMap<String, Vec<ProcessingLink>> = HashMap::new();
    for (i, cells) in rows.iter().enumerate() {
        let key = structure_key(&cells[0].text);
        let Some(requested) = structures.iter().find(|s| structure_key(s) == key) else {
            warnings.push(format!(
                "paper {}: sub-table 2 row {} names unrequested structure `{}`, dropped",
                paper.paper_id,
                i + 1,
                cells[0].text
            ));
            continue;
        };
        let processing = if is_na(&cells[2].text) {
            NA.to_string()
        } else {
            cells[2].text.clone()
        };
        let mech_ps = if processing == NA && cells[1].text.is_empty() {
            Mechanism::missing_processing()
        } else {
            cells[1].to_mechanism(i + 1, &mut warnings)
        };
        by_key.entry(key).or_default().push(ProcessingLink {
            structure: requested.clone(),
            mech_ps,
            processing,
        });
    }
    let mut links = Vec::new();
    for structure in structures {
        match by_key.remove(&structure_key(structure)) {
            Some(found) => links.extend(found),
            None => links.push(ProcessingLink {
                structure: structure.clone(),
                mech_ps: Mechanism::missing_processing(),
                processing: NA.to_string(),
            }),
        }
    }
    Ok(Warned::with_warnings(SubTable2 { links }, warnings))
}

fn join_texts<'a>(texts: impl Iterator<Item = &'a str>) -> String {
    let mut seen = BTreeSet::new();
    texts
        .filter(|t| seen.insert(t.trim().to_lowercase()))
        .collect::<Vec<_>>()
        .join("; ")
}

fn combine_mechanisms(mechs: &[&Mechanism]) -> Mechanism {
    let text = join_texts(mechs.iter().map(|m| m.text.as_str()));
    let source = if mechs.iter().all(|m| m.source == MechanismSource::FromText) {
        MechanismSource::FromText
    } else {
        MechanismSource::FromKnowledgeBase
    };
    Mechanism { text, source }
}

/// One row per distinct sub-table 1 structure. Several properties (or
/// processing routes) on one structure are combined into `;`-separated cells,
/// which visualization later splits back into rows.
pub fn join_subtables(paper_id: u32, st1: &SubTable1, st2: &SubTable2) -> Warned<SystemChart> {
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (i, structure) in st1.structures().into_iter().enumerate() {
        let key = structure_key(&structure);
        let props: Vec<&PropertyLink> = st1
            .links
            .iter()
            .filter(|l| structure_key(&l.structure) == key)
            .collect();
        let procs: Vec<&ProcessingLink> = st2
            .links
            .iter()
            .filter(|l| structure_key(&l.structure) == key)
            .collect();
        let prop_mechs: Vec<&Mechanism> = props.iter().map(|l| &l.mech_sp).collect();
        let (processing, mech_ps) = if procs.is_empty() {
            warnings.push(format!(
                "paper {paper_id}: structure `{structure}` has no processing, set to N/A"
            ));
            (NA.to_string(), Mechanism::missing_processing())
        } else {
            let real: Vec<&&ProcessingLink> = procs.iter().filter(|l| l.processing != NA).collect();
            if real.is_empty() {
                (NA.to_string(), procs[0].mech_ps.clone())
            } else {
                let mechs: Vec<&Mechanism> = real.iter().map(|l| &l.mech_ps).collect();
                (
                    join_texts(real.iter().map(|l| l.processing.as_str())),
                    combine_mechanisms(&mechs),
                )
            }
        };
        let mixed = prop_mechs.windows(2).any(|w| w[0].source != w[1].source);
        if mixed {
            warnings.push(format!(
                "paper {paper_id}: structure `{structure}` combines mechanisms of mixed provenance, labeled From knowledge base"
            ));
        }
        rows.push(ChartRow {
            row_index: i as u32 + 1,
            processing,
            mech_ps,
            structure,
            mech_sp: combine_mechanisms(&prop_mechs),
            property: join_texts(props.iter().map(|l| l.property.as_str())),
        });
    }
    Warned::with_warnings(SystemChart::new(paper_id, rows), warnings)
}

/// Both sub-tables and the join for one paper.
pub fn extract_chart(
    paper: &PaperRecord,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<SystemChart>> {
    let st1 = extract_subtable1(paper, profile, gateway)?;
    let st2 = extract_subtable2(paper, &st1.value.structures(), profile, gateway)?;
    let joined = join_subtables(paper.paper_id, &st1.value, &st2.value);
    let mut warnings = st1.warnings;
    warnings.extend(st2.warnings);
    warnings.extend(joined.warnings);
    Ok(Warned::with_warnings(joined.value, warnings))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChartWarning {
    DuplicateStructure { structure: String, rows: Vec<u32> },
    EmptyMechanism { row: u32, which: &'static str },
    AllNa { row: u32 },
    NaStructure { row: u32 },
    MajorityKnowledgeBase { knowledge_base: usize, total: usize },
}

impl fmt::Display for ChartWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChartWarning::DuplicateStructure { structure, rows } => {
                write!(f, "duplicate structure `{structure}` in rows {rows:?}")
            }
            ChartWarning::EmptyMechanism { row, which } => {
                write!(f, "row {row}: empty {which} mechanism")
            }
            ChartWarning::AllNa { row } => {
                write!(f, "row {row}: processing and property are both N/A")
            }
            ChartWarning::NaStructure { row } => write!(f, "row {row}: structure is N/A"),
            ChartWarning::MajorityKnowledgeBase {
                knowledge_base,
                total,
            } => write!(
                f,
                "{knowledge_base} of {total} mechanisms come from the knowledge base"
            ),
        }
    }
}

pub fn validate_chart(chart: &SystemChart) -> Vec<ChartWarning> {
    let mut warnings = Vec::new();
    let mut groups: Vec<(String, Vec<u32>)> = Vec::new();
    for row in &chart.rows {
        let key = structure_key(&row.structure);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rows)) => rows.push(row.row_index),
            None => groups.push((key, vec![row.row_index])),
        }
    }
    for (key, rows) in groups {
        if rows.len() > 1 {
            let structure = chart
                .rows
                .iter()
                .find(|r| structure_key(&r.structure) == key)
                .map(|r| r.structure.clone())
                .unwrap_or(key);
            warnings.push(ChartWarning::DuplicateStructure { structure, rows });
        }
    }
    let mut kb = 0;
    for row in &chart.rows {
        if row.mech_ps.text.trim().is_empty() {
            warnings.push(ChartWarning::EmptyMechanism {
                row: row.row_index,
                which: "processing→structure",
            });
        }
        if row.mech_sp.text.trim().is_empty() {
            warnings.push(ChartWarning::EmptyMechanism {
                row: row.row_index,
                which: "structure→property",
            });
        }
        if is_na(&row.structure) {
            warnings.push(ChartWarning::NaStructure { row: row.row_index });
        }
        if is_na(&row.processing) && is_na(&row.property) {
            warnings.push(ChartWarning::AllNa { row: row.row_index });
        }
        kb += [&row.mech_ps, &row.mech_sp]
            .iter()
            .filter(|m| m.source == MechanismSource::FromKnowledgeBase)
            .count();
    }
    let total = chart.rows.len() * 2;
    if total > 0 && kb * 2 > total {
        warnings.push(ChartWarning::MajorityKnowledgeBase {
            knowledge_base: kb,
            total,
        });
    }
    warnings
}

pub const CSV_HEADER: [&str; 7] = [
    "Processing",
    "Mechanism(P→S)",
    "Source",
    "Structure",
    "Mechanism(S→P)",
    "Source",
    "Property",
];

/// Combined CSV of all charts, rows in (paper_id, row_index) order.
pub fn charts_csv(charts: &[SystemChart]) -> Result<String> {
    let mut charts: Vec<&SystemChart> = charts.iter().collect();
    charts.sort_by_key(|c| c.paper_id);
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER)?;
    for chart in charts {
        let mut rows: Vec<&ChartRow> = chart.rows.iter().collect();
        rows.sort_by_key(|r| r.row_index);
        for row in rows {
            writer.write_record([
                row.processing.as_str(),
                row.mech_ps.text.as_str(),
                row.mech_ps.source.label(),
                row.structure.as_str(),
                row.mech_sp.text.as_str(),
                row.mech_sp.source.label(),
                row.property.as_str(),
            ])?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 cells is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainProfile;
    use crate::gateway::{build_profile, ProfileConfig, ScriptedBackend, ScriptedRule, Stage};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn paper() -> PaperRecord {
        PaperRecord {
            paper_id: 4,
            set_label: "high entropy alloy".into(),
            title: "Cyclic torsion gradient HEA".into(),
            venue: "Science".into(),
            year: 2021,
            body_text:
                "Cyclic torsion produces gradient dislocation cells that nucleate stacking faults."
                    .into(),
            token_estimate: 14,
        }
    }

    fn profile() -> StageProfile {
        build_profile(
            Stage::Extraction,
            &DomainProfile::cryogenic_hea(),
            &ProfileConfig::default(),
        )
        .unwrap()
    }

    fn gateway(rules: Vec<ScriptedRule>) -> (Gateway, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::from_rules(rules));
        (Gateway::new(backend.clone()), backend)
    }

    fn st1_rules(table: &str) -> Vec<ScriptedRule> {
        vec![
            ScriptedRule::new(&["step 1 of 3"], "Room-temperature strength and ductility"),
            ScriptedRule::new(&["step 2 of 3"], "Gradient dislocation cell structures"),
            ScriptedRule::new(&["step 3 of 3"], table),
        ]
    }

    #[test]
    fn subtable1_from_fixture() {
        let (gw, backend) = gateway(st1_rules(
            "| Property | Mechanism (Structure→Property) | Structure |\n|---|---|---|\n\
             | RT strength and ductility | GDSs serve as nucleation sites for SFs (From text) | gradient dislocation cell structures |",
        ));
        let st1 = extract_subtable1(&paper(), &profile(), &gw).unwrap().value;
        assert_eq!(
            st1.links,
            vec![PropertyLink {
                property: "RT strength and ductility".into(),
                mech_sp: Mechanism::from_text("GDSs serve as nucleation sites for SFs"),
                structure: "gradient dislocation cell structures".into(),
            }]
        );
        assert_eq!(backend.call_count(), 3);
        // the three turns form one conversation
        assert_eq!(backend.ledger().len(), 3);
    }

    #[test]
    fn knowledge_base_mechanism_kept() {
        let (gw, _) = gateway(st1_rules(
            "| hardness | solid-solution strengthening (From knowledge base) | fcc matrix |",
        ));
        let st1 = extract_subtable1(&paper(), &profile(), &gw).unwrap().value;
        assert_eq!(
            st1.links[0].mech_sp.source,
            MechanismSource::FromKnowledgeBase
        );
    }

    #[test]
    fn empty_reply_errors_after_reprompt() {
        let mut rules = st1_rules("");
        rules.push(ScriptedRule::new(&["could not be parsed"], "still nothing"));
        let (gw, backend) = gateway(rules);
        let err = extract_subtable1(&paper(), &profile(), &gw).unwrap_err();
        assert!(err.to_string().contains("no rows parsed"), "{err}");
        match err {
            Error::Extraction {
                digest, paper_id, ..
            } => {
                assert_eq!(paper_id, 4);
                assert_eq!(digest.len(), 64);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(backend.call_count(), 4);
    }

    #[test]
    fn reprompt_repairs_format() {
        let mut rules = vec![ScriptedRule::new(
            &["could not be parsed"],
            "| p | m (From text) | s |",
        )];
        rules.extend(st1_rules("| p | m |"));
        let (gw, backend) = gateway(rules);
        let st1 = extract_subtable1(&paper(), &profile(), &gw).unwrap().value;
        assert_eq!(st1.links.len(), 1);
        assert_eq!(backend.call_count(), 4);
    }

    #[test]
    fn subtable2_fixture_and_missing_structure() {
        let (gw, _) = gateway(vec![ScriptedRule::new(
            &["sub-table 2"],
            "| Structure | Mechanism | Processing |\n|---|---|---|\n\
             | gradient dislocation cell structures | CT imposes gradient plastic strain forming dislocation cells (From text) | cyclic torsion treatment |",
        )]);
        let structures = vec![
            "gradient dislocation cell structures".to_string(),
            "L12 precipitates".to_string(),
        ];
        let st2 = extract_subtable2(&paper(), &structures, &profile(), &gw)
            .unwrap()
            .value;
        assert_eq!(st2.links.len(), 2);
        assert_eq!(st2.links[0].processing, "cyclic torsion treatment");
        assert_eq!(
            st2.links[0].mech_ps,
            Mechanism::from_text("CT imposes gradient plastic strain forming dislocation cells")
        );
        assert_eq!(st2.links[1].processing, NA);
        assert_eq!(
            st2.links[1].mech_ps.source,
            MechanismSource::FromKnowledgeBase
        );
    }

    #[test]
    fn two_processings_for_one_structure_are_combined() {
        let (gw, _) = gateway(vec![ScriptedRule::new(
            &["sub-table 2"],
            "| B2 precipitates | rolling introduces defects (From text) | cold rolling |\n\
             | B2 precipitates | annealing nucleates B2 (From text) | annealing |",
        )]);
        let structures = vec!["B2 precipitates".to_string()];
        let st2 = extract_subtable2(&paper(), &structures, &profile(), &gw)
            .unwrap()
            .value;
        assert_eq!(st2.links.len(), 2);
        let st1 = SubTable1 {
            links: vec![PropertyLink {
                property: "strength".into(),
                mech_sp: Mechanism::from_text("precipitation hardening"),
                structure: "B2 precipitates".into(),
            }],
        };
        let chart = join_subtables(1, &st1, &st2).value;
        assert_eq!(chart.rows.len(), 1);
        assert_eq!(chart.rows[0].processing, "cold rolling; annealing");
    }

    fn link(structure: &str) -> PropertyLink {
        PropertyLink {
            property: format!("property of {structure}"),
            mech_sp: Mechanism::from_text(format!("{structure} acts")),
            structure: structure.into(),
        }
    }

    #[test]
    fn join_with_partial_coverage() {
        let st1 = SubTable1 {
            links: vec![link("A"), link("B"), link("C")],
        };
        let st2 = SubTable2 {
            links: vec![
                ProcessingLink {
                    structure: "a".into(),
                    mech_ps: Mechanism::from_text("x"),
                    processing: "p1".into(),
                },
                ProcessingLink {
                    structure: " C ".into(),
                    mech_ps: Mechanism::from_text("y"),
                    processing: "p3".into(),
                },
            ],
        };
        let joined = join_subtables(9, &st1, &st2);
        let rows = &joined.value.rows;
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].processing, "p1");
        assert_eq!(rows[1].processing, NA);
        assert_eq!(rows[2].processing, "p3");
        assert_eq!(joined.warnings.len(), 1);
        assert_eq!(
            joined.value.chart_token_estimate,
            token_estimate(&render_chart(rows))
        );
    }

    #[test]
    fn vacuous_join() {
        let st1 = SubTable1 {
            links: vec![link("A"), link("B")],
        };
        let chart = join_subtables(1, &st1, &SubTable2::default()).value;
        assert!(chart.rows.iter().all(|r| r.processing == NA));
    }

    #[test]
    fn validate_examples() {
        let st1 = SubTable1 {
            links: vec![link("A"), link("B")],
        };
        let st2 = SubTable2 {
            links: vec![
                ProcessingLink {
                    structure: "A".into(),
                    mech_ps: Mechanism::from_text("x"),
                    processing: "p".into(),
                },
                ProcessingLink {
                    structure: "B".into(),
                    mech_ps: Mechanism::from_text("y"),
                    processing: "q".into(),
                },
            ],
        };
        let mut chart = join_subtables(1, &st1, &st2).value;
        assert!(validate_chart(&chart).is_empty());
        chart.rows[1].structure = "A".into();
        assert!(matches!(
            validate_chart(&chart)[..],
            [ChartWarning::DuplicateStructure { ref rows, .. }] if rows == &vec![1, 2]
        ));
        chart.rows[1].structure = "B".into();
        chart.rows[0].mech_sp.text.clear();
        assert_eq!(
            validate_chart(&chart),
            vec![ChartWarning::EmptyMechanism {
                row: 1,
                which: "structure→property"
            }]
        );
    }

    #[test]
    fn csv_has_spec_columns() {
        let st1 = SubTable1 {
            links: vec![link("A, with comma")],
        };
        let chart = join_subtables(1, &st1, &SubTable2::default()).value;
        let csv = charts_csv(&[chart]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "Processing,Mechanism(P→S),Source,Structure,Mechanism(S→P),Source,Property"
        );
        assert!(lines.next().unwrap().contains("\"A, with comma\""));
    }

    fn cell() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9 ,.%°+/-]{0,20}".prop_map(|s| s.trim().to_string())
    }

    fn mechanism() -> impl Strategy<Value = Mechanism> {
        (cell(), any::<bool>()).prop_map(|(t, kb)| {
            if kb {
                Mechanism::from_knowledge_base(t)
            } else {
                Mechanism::from_text(t)
            }
        })
    }

    proptest! {
        #[test]
        fn chart_round_trips_through_table(rows in proptest::collection::vec((cell(), mechanism(), cell(), mechanism(), cell()), 1..6)) {
            let rows: Vec<ChartRow> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (p, m1, s, m2, q))| ChartRow {
                    row_index: i as u32 + 1,
                    processing: p,
                    mech_ps: m1,
                    structure: s,
                    mech_sp: m2,
                    property: q,
                })
                .collect();
            let parsed = parse_chart_rows(&render_chart(&rows)).unwrap();
            prop_assert!(parsed.warnings.is_empty());
            prop_assert_eq!(parsed.value, rows);
        }

        #[test]
        fn join_yields_one_row_per_structure(names in proptest::collection::vec("[a-e]", 1..10), covered in proptest::collection::vec("[a-g]", 0..10)) {
            let st1 = SubTable1 { links: names.iter().map(|n| link(n)).collect() };
            let st2 = SubTable2 {
                links: covered
                    .iter()
                    .map(|c| ProcessingLink { structure: c.clone(), mech_ps: Mechanism::from_text("m"), processing: "p".into() })
                    .collect(),
            };
            let chart = join_subtables(1, &st1, &st2).value;
            prop_assert_eq!(chart.rows.len(), st1.structures().len());
        }
    }
}
