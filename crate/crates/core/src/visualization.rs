//! Chart normalization and graph emission.
//!
//! Charts are split into single-processing, single-property rows, tagged and
//! simplified by the backend, and have N/A structure or property cells filled
//! from sibling rows. The result, or a hypothesis with its two source rows,
//! becomes a typed graph written as DOT.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::table::{parse_chart_table, render_table};
use crate::extraction::{complete_with_repair, is_na, ChartRow, Mechanism, SystemChart, NA};
use crate::gateway::{Gateway, StageProfile};
use crate::generation::Hypothesis;
use crate::Warned;

pub const LIST_DELIMITER: char = ';';
pub const LABEL_WIDTH: usize = 24;

fn split_cell(cell: &str) -> Vec<String> {
    if !cell.contains(LIST_DELIMITER) {
        return vec![cell.to_string()];
    }
    let parts: Vec<String> = cell
        .split(LIST_DELIMITER)
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    if parts.is_empty() {
        vec![cell.replace(LIST_DELIMITER, "").trim().to_string()]
    } else {
        parts
    }
}

/// The mechanism for item `i` of `n` split items: the matching item of a
/// `;`-list of the same length, else the whole mechanism.
fn mechanism_for(mech: &Mechanism, i: usize, n: usize) -> Mechanism {
    let parts = split_cell(&mech.text);
    if n > 1 && parts.len() == n {
        Mechanism {
            text: parts[i].clone(),
            source: mech.source,
        }
    } else {
        mech.clone()
    }
}

/// Duplicates rows whose processing or property cell lists several items,
/// one row per (processing, property) combination, and renumbers rows from 1.
/// A mechanism listing as many items as its processing or property cell is
/// split alongside it.
pub fn split_combined_rows(chart: &SystemChart) -> SystemChart {
    let mut rows = Vec::new();
    for row in &chart.rows {
        let processes = split_cell(&row.processing);
        let properties = split_cell(&row.property);
        for (i, processing) in processes.iter().enumerate() {
            for (j, property) in properties.iter().enumerate() {
                rows.push(ChartRow {
                    row_index: rows.len() as u32 + 1,
                    processing: processing.clone(),
                    mech_ps: mechanism_for(&row.mech_ps, i, processes.len()),
                    structure: row.structure.clone(),
                    mech_sp: mechanism_for(&row.mech_sp, j, properties.len()),
                    property: property.clone(),
                });
            }
        }
    }
    SystemChart::new(chart.paper_id, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FillColumn {
    Structure,
    Property,
}

/// An N/A cell replaced with text taken from a sibling row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fill {
    pub column: FillColumn,
    pub donor_row: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub row: ChartRow,
    pub structure_tag: Option<String>,
    #[serde(default)]
    pub fills: Vec<Fill>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedChart {
    pub paper_id: u32,
    pub rows: Vec<NormalizedRow>,
}

impl NormalizedChart {
    pub fn untagged(chart: &SystemChart) -> Self {
        Self {
            paper_id: chart.paper_id,
            rows: chart
                .rows
                .iter()
                .map(|row| NormalizedRow {
                    row: row.clone(),
                    structure_tag: None,
                    fills: Vec::new(),
                })
                .collect(),
        }
    }
}

fn environment_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)-?\d+(?:\.\d+)?\s*(?:K|°C|℃|°F)\b|\b(?:cryogenic|room temperature|RT|liquid nitrogen|liquid helium|ambient|vacuum|argon|nitrogen atmosphere|in air|humid(?:ity)?|elevated temperature|high temperature|low temperature)\b",
        )
        .unwrap()
    })
}

/// Environmental conditions mentioned in `text`, normalized for comparison.
pub fn environment_tokens(text: &str) -> BTreeSet<String> {
    environment_re()
        .find_iter(text)
        .map(|m| {
            m.as_str()
                .to_lowercase()
                .split_whitespace()
                .collect::<Vec<_>>()
                .join("")
        })
        .collect()
}

pub const TAG_HEADER: [&str; 5] = [
    "Row",
    "Processing",
    "Structure",
    "Structure tag",
    "Property",
];

pub fn tag_prompt(chart: &SystemChart) -> String {
    let rows: Vec<Vec<String>> = chart
        .rows
        .iter()
        .map(|r| {
            vec![
                r.row_index.to_string(),
                r.processing.clone(),
                r.structure.clone(),
                r.property.clone(),
            ]
        })
        .collect();
    format!(
        "System chart visualization. For each row below, tag the structure with a short category name and simplify \
         detailed parameters (sizes, fractions, rates) in the processing, structure and property cells while \
         retaining environmental conditions such as temperature or atmosphere. Keep N/A cells as N/A.\n\n{}\n\
         Reply with a pipe-delimited table with the columns {}, one row for every input row, same row numbers.",
        render_table(&["Row", "Processing", "Structure", "Property"], &rows),
        TAG_HEADER.join(" | ")
    )
}

struct TaggedCells {
    processing: String,
    structure: String,
    tag: String,
    property: String,
}

fn parse_tag_reply(raw: &str, expected: &[u32]) -> std::result::Result<Vec<TaggedCells>, String> {
    let rows = parse_chart_table(raw, TAG_HEADER.len()).map_err(|e| e.to_string())?;
    if rows.len() != expected.len() {
        return Err(format!(
            "reply has {} rows, the chart has {}",
            rows.len(),
            expected.len()
        ));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (cells, &want) in rows.iter().zip(expected) {
        let got = cells[0].raw();
        if got.trim().parse::<u32>().ok() != Some(want) {
            return Err(format!("row number `{got}` where {want} was expected"));
        }
        out.push(TaggedCells {
            processing: cells[1].raw(),
            structure: cells[2].raw(),
            tag: cells[3].raw(),
            property: cells[4].raw(),
        });
    }
    Ok(out)
}

/// Keeps `simplified` unless it loses an environmental condition present in
/// `original`, or invents a value for an N/A cell.
fn accept_simplified(
    original: &str,
    simplified: &str,
    where_: &str,
    warnings: &mut Vec<String>,
) -> String {
    if is_na(original) {
        return original.to_string();
    }
    if simplified.trim().is_empty() {
        warnings.push(format!(
            "{where_}: simplification left the cell empty, kept original"
        ));
        return original.to_string();
    }
    let lost: Vec<String> = environment_tokens(original)
        .difference(&environment_tokens(simplified))
        .cloned()
        .collect();
    if !lost.is_empty() {
        warnings.push(format!(
            "{where_}: simplification dropped {lost:?}, kept original"
        ));
        return original.to_string();
    }
    simplified.trim().to_string()
}

/// Backend tagging and simplification, one output row per input row. A
/// reply that breaks the row contract twice falls back to untagged rows.
pub fn tag_and_simplify(
    chart: &SystemChart,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<NormalizedChart>> {
    if chart.rows.is_empty() {
        return Ok(Warned::new(NormalizedChart::untagged(chart)));
    }
    let expected: Vec<u32> = chart.rows.iter().map(|r| r.row_index).collect();
    let outcome = complete_with_repair(
        gateway,
        profile.request(tag_prompt(chart)),
        |raw| parse_tag_reply(raw, &expected),
        |e| {
            format!(
                "Your previous reply could not be parsed: {e}. Reply again with exactly {} rows and the columns {}.",
                expected.len(),
                TAG_HEADER.join(" | ")
            )
        },
    )?;
    let mut warnings = Vec::new();
    let tagged = match outcome {
        Ok(tagged) => tagged,
        Err((digest, reason)) => {
            warnings.push(format!(
                "paper {}: tagging failed ({reason}, request {digest}), using untagged rows",
                chart.paper_id
            ));
            return Ok(Warned::with_warnings(
                NormalizedChart::untagged(chart),
                warnings,
            ));
        }
    };
    let rows = chart
        .rows
        .iter()
        .zip(tagged)
        .map(|(row, t)| {
            let at = |col: &str| format!("paper {} row {} {col}", chart.paper_id, row.row_index);
            NormalizedRow {
                row: ChartRow {
                    processing: accept_simplified(
                        &row.processing,
                        &t.processing,
                        &at("processing"),
                        &mut warnings,
                    ),
                    structure: accept_simplified(
                        &row.structure,
                        &t.structure,
                        &at("structure"),
                        &mut warnings,
                    ),
                    property: accept_simplified(
                        &row.property,
                        &t.property,
                        &at("property"),
                        &mut warnings,
                    ),
                    ..row.clone()
                },
                structure_tag: (!t.tag.trim().is_empty() && !is_na(&t.tag))
                    .then(|| t.tag.trim().to_string()),
                fills: Vec::new(),
            }
        })
        .collect();
    Ok(Warned::with_warnings(
        NormalizedChart {
            paper_id: chart.paper_id,
            rows,
        },
        warnings,
    ))
}

fn column_text(row: &ChartRow, column: FillColumn) -> &str {
    match column {
        FillColumn::Structure => &row.structure,
        FillColumn::Property => &row.property,
    }
}

fn norm(text: &str) -> String {
    text.trim().trim_end_matches('.').trim().to_lowercase()
}

/// Rows other than `target` that share a non-N/A processing, structure or
/// property cell with it.
fn siblings<'a>(rows: &'a [NormalizedRow], target: &ChartRow) -> Vec<&'a ChartRow> {
    let shared = |a: &str, b: &str| !is_na(a) && !is_na(b) && norm(a) == norm(b);
    rows.iter()
        .map(|r| &r.row)
        .filter(|r| r.row_index != target.row_index)
        .filter(|r| {
            shared(&r.processing, &target.processing)
                || shared(&r.structure, &target.structure)
                || shared(&r.property, &target.property)
        })
        .collect()
}

pub fn fill_prompt(target: &ChartRow, column: FillColumn, siblings: &[&ChartRow]) -> String {
    let name = match column {
        FillColumn::Structure => "Structure",
        FillColumn::Property => "Property",
    };
    let mut prompt = format!(
        "System chart N/A replacement. The {name} cell of the row below is N/A.\nRow {}: {}\n\nRelated rows of the same chart:\n",
        target.row_index,
        target.linearized()
    );
    for s in siblings {
        let _ = writeln!(prompt, "Row {}: {}", s.row_index, s.linearized());
    }
    prompt.push_str(&format!(
        "\nBy comparing the related rows, give the {name} value this row should carry. Use only text that appears in the \
         related rows; do not invent new values. Reply with one line:\nFill: <value>\nor\nFill: keep N/A"
    ));
    prompt
}

fn fill_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*fill[ \t]*:[ \t]*(.+?)[ \t]*$").unwrap())
}

fn parse_fill_reply(raw: &str) -> std::result::Result<Option<String>, String> {
    let caps = fill_re().captures(raw).ok_or("no `Fill:` line")?;
    let value = caps[1].trim().trim_matches('"').trim();
    if value.to_lowercase().contains("keep n/a") || is_na(value) {
        Ok(None)
    } else {
        Ok(Some(value.to_string()))
    }
}

/// Donor for `text`: a sibling whose same column equals it, else one whose
/// row mentions it anywhere.
fn find_donor(text: &str, column: FillColumn, siblings: &[&ChartRow]) -> Option<u32> {
    let wanted = norm(text);
    siblings
        .iter()
        .find(|s| norm(column_text(s, column)) == wanted)
        .or_else(|| {
            siblings
                .iter()
                .find(|s| s.cells().iter().any(|c| norm(c).contains(&wanted)))
        })
        .map(|s| s.row_index)
}

/// Replaces N/A structure and property cells with text transferred from
/// sibling rows. Fills that no sibling contains are rejected.
pub fn fill_na(
    chart: &NormalizedChart,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<NormalizedChart>> {
    let mut out = chart.clone();
    let mut warnings = Vec::new();
    for i in 0..chart.rows.len() {
        for column in [FillColumn::Structure, FillColumn::Property] {
            let target = &out.rows[i].row;
            if !is_na(column_text(target, column)) {
                continue;
            }
            let sibs = siblings(&chart.rows, target);
            if sibs.is_empty() {
                continue;
            }
            let target = target.clone();
            let outcome = complete_with_repair(
                gateway,
                profile.request(fill_prompt(&target, column, &sibs)),
                parse_fill_reply,
                |e| {
                    format!("Your previous reply could not be parsed: {e}. Reply with one line: Fill: <value> or Fill: keep N/A")
                },
            )?;
            let at = format!(
                "paper {} row {} {column:?}",
                chart.paper_id, target.row_index
            );
            let value = match outcome {
                Ok(Some(value)) => value,
                Ok(None) => continue,
                Err((digest, reason)) => {
                    warnings.push(format!(
                        "{at}: fill reply unparseable ({reason}, request {digest}), N/A kept"
                    ));
                    continue;
                }
            };
            let Some(donor_row) = find_donor(&value, column, &sibs) else {
                warnings.push(format!(
                    "{at}: proposed fill `{value}` appears in no sibling row, N/A kept"
                ));
                continue;
            };
            let row = &mut out.rows[i];
            match column {
                FillColumn::Structure => row.row.structure = value.clone(),
                FillColumn::Property => row.row.property = value.clone(),
            }
            row.fills.push(Fill {
                column,
                donor_row,
                text: value,
            });
        }
    }
    Ok(Warned::with_warnings(out, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Processing,
    Mechanism,
    Structure,
    Property,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    SetA,
    SetB,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Flow,
    Interdependency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: String,
    pub kind: NodeKind,
    pub label: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartGraph {
    pub nodes: BTreeMap<String, Node>,
    pub edges: Vec<Edge>,
}

impl ChartGraph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }
}

const FLOW_KINDS: [(NodeKind, &str); 5] = [
    (NodeKind::Processing, "1_processing"),
    (NodeKind::Mechanism, "2_mech_ps"),
    (NodeKind::Structure, "3_structure"),
    (NodeKind::Mechanism, "4_mech_sp"),
    (NodeKind::Property, "5_property"),
];

/// Adds one row's flow path. Structure and property nodes are shared by
/// exact label within `prefix`; N/A cells are never shared.
fn add_row_path(
    graph: &mut ChartGraph,
    prefix: &str,
    row: &ChartRow,
    origin: Origin,
    shared: &mut BTreeMap<(NodeKind, String), String>,
) -> [String; 5] {
    let labels = [
        row.processing.clone(),
        row.mech_ps.text.clone(),
        row.structure.clone(),
        row.mech_sp.text.clone(),
        row.property.clone(),
    ];
    let ids: [String; 5] = std::array::from_fn(|i| {
        let (kind, suffix) = FLOW_KINDS[i];
        let label = &labels[i];
        let mergeable = matches!(kind, NodeKind::Structure | NodeKind::Property) && !is_na(label);
        if mergeable {
            if let Some(id) = shared.get(&(kind, label.clone())) {
                return id.clone();
            }
        }
        let id = format!("{prefix}{:03}_{suffix}", row.row_index);
        graph.nodes.insert(
            id.clone(),
            Node {
                node_id: id.clone(),
                kind,
                label: label.clone(),
                origin,
            },
        );
        if mergeable {
            shared.insert((kind, label.clone()), id.clone());
        }
        id
    });
    for pair in ids.windows(2) {
        let edge = Edge {
            from: pair[0].clone(),
            to: pair[1].clone(),
            kind: EdgeKind::Flow,
        };
        if !graph.edges.contains(&edge) {
            graph.edges.push(edge);
        }
    }
    ids
}

/// Chart mode: one flow path per row.
pub fn build_chart_graph(chart: &NormalizedChart, origin: Origin) -> ChartGraph {
    let mut graph = ChartGraph::default();
    let mut shared = BTreeMap::new();
    for row in &chart.rows {
        add_row_path(&mut graph, "r", &row.row, origin, &mut shared);
    }
    graph.edges.sort();
    graph
}

fn linked_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t]*\**linked mechanisms\**[ \t]*:[ \t]*(.+?)[ \t]*<->[ \t]*(.+?)[ \t]*$",
        )
        .unwrap()
    })
}

/// The `Linked mechanisms: X <-> Y` line of a hypothesis, if present.
pub fn linked_mechanisms(text: &str) -> Option<(String, String)> {
    linked_re()
        .captures(text)
        .map(|c| (c[1].trim().to_string(), c[2].trim().to_string()))
}

/// Which of the row's two mechanism nodes `named` refers to.
fn match_mechanism(named: &str, row: &ChartRow) -> Option<usize> {
    let wanted = norm(named);
    let candidates = [(1usize, &row.mech_ps.text), (3usize, &row.mech_sp.text)];
    candidates
        .iter()
        .find(|(_, text)| norm(text) == wanted)
        .or_else(|| {
            candidates.iter().find(|(_, text)| {
                let t = norm(text);
                !t.is_empty() && (t.contains(&wanted) || wanted.contains(&t))
            })
        })
        .map(|(i, _)| *i)
}

/// Hypothesis mode: both source rows' paths plus one generated
/// interdependency between the linked mechanisms. Without a
/// `Linked mechanisms:` line the structure→property mechanisms are linked.
pub fn build_hypothesis_graph(
    h: &Hypothesis,
    row_a: &ChartRow,
    row_b: &ChartRow,
) -> Result<ChartGraph> {
    let mut graph = ChartGraph::default();
    let ids_a = add_row_path(&mut graph, "a", row_a, Origin::SetA, &mut BTreeMap::new());
    let ids_b = add_row_path(&mut graph, "b", row_b, Origin::SetB, &mut BTreeMap::new());
    let (from, to) = match linked_mechanisms(&h.text) {
        None => (3, 3),
        Some((x, y)) => {
            let (ma, mb) = (match_mechanism(&x, row_a), match_mechanism(&y, row_b));
            match (ma, mb) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    let mut missing = Vec::new();
                    if ma.is_none() {
                        missing.push(format!(
                            "`{x}` is not a mechanism of paper {} row {}",
                            h.pair.a.paper_id, h.pair.a.row_index
                        ));
                    }
                    if mb.is_none() {
                        missing.push(format!(
                            "`{y}` is not a mechanism of paper {} row {}",
                            h.pair.b.paper_id, h.pair.b.row_index
                        ));
                    }
                    return Err(Error::Invalid(format!(
                        "hypothesis {}: {}",
                        h.hypothesis_id,
                        missing.join("; ")
                    )));
                }
            }
        }
    };
    graph.edges.sort();
    graph.edges.push(Edge {
        from: ids_a[from].clone(),
        to: ids_b[to].clone(),
        kind: EdgeKind::Interdependency,
    });
    Ok(graph)
}

fn shape(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Processing => "box",
        NodeKind::Mechanism => "ellipse",
        NodeKind::Structure => "hexagon",
        NodeKind::Property => "diamond",
    }
}

fn color(origin: Origin) -> &'static str {
    match origin {
        Origin::SetA => "red",
        Origin::SetB => "blue",
        Origin::Generated => "green",
    }
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Label text wrapped at [`LABEL_WIDTH`] columns, lines joined by DOT's `\n`.
pub fn wrap_label(label: &str) -> String {
    let source = if label.trim().is_empty() { NA } else { label };
    textwrap::wrap(source, LABEL_WIDTH)
        .iter()
        .map(|line| escape(line))
        .collect::<Vec<_>>()
        .join("\\n")
}

/// DOT text: nodes in sorted id order, then edges in graph order.
pub fn emit_dot(graph: &ChartGraph) -> String {
    if graph.nodes.is_empty() && graph.edges.is_empty() {
        return "digraph chart { }".to_string();
    }
    let mut out = String::from("digraph chart {\n  rankdir=LR;\n");
    for node in graph.nodes.values() {
        let _ = writeln!(
            out,
            "  \"{}\" [shape={}, color={}, label=\"{}\"];",
            escape(&node.node_id),
            shape(node.kind),
            color(node.origin),
            wrap_label(&node.label)
        );
    }
    for edge in &graph.edges {
        let attrs = match edge.kind {
            EdgeKind::Flow => String::new(),
            EdgeKind::Interdependency => " [style=dashed, color=green]".to_string(),
        };
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\"{};",
            escape(&edge.from),
            escape(&edge.to),
            attrs
        );
    }
    out.push_str("}\n");
    out
}
