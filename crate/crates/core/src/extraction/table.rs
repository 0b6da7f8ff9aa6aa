//! Pipe-delimited table parsing and rendering.
//!
//! Model replies are asked to contain a markdown-style table. The parser
//! accepts fenced or bare tables, with or without a header, ignores prose
//! lines that contain no pipe, and fails with a typed error on arity
//! mismatches instead of guessing.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;

use super::{Mechanism, MechanismSource};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableCell {
    pub text: String,
    /// Provenance suffix found on the cell, if any.
    pub source: Option<MechanismSource>,
}

impl TableCell {
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: None,
        }
    }

    /// Reads the cell as a mechanism. A missing provenance suffix defaults to
    /// from-text and records a warning.
    pub fn to_mechanism(&self, row: usize, warnings: &mut Vec<String>) -> Mechanism {
        let source = self.source.unwrap_or_else(|| {
            warnings.push(format!(
                "row {row}: mechanism `{}` has no source label, assuming From text",
                self.text
            ));
            MechanismSource::FromText
        });
        Mechanism {
            text: self.text.clone(),
            source,
        }
    }

    /// Cell text with any provenance suffix re-attached.
    pub fn raw(&self) -> String {
        match self.source {
            Some(source) if self.text.is_empty() => source.suffix().to_string(),
            Some(source) => format!("{} {}", self.text, source.suffix()),
            None => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowParseError {
    /// 1-based data-row number (header and separators excluded).
    pub row: usize,
    /// 1-based line number in the raw reply.
    pub line: usize,
    pub raw: String,
    pub expected: usize,
    pub found: usize,
}

impl fmt::Display for RowParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "row {} (line {}) has {} cells, expected {}: {}",
            self.row, self.line, self.found, self.expected, self.raw
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("{0}")]
    Row(RowParseError),
    #[error("no rows parsed")]
    Empty,
}

fn source_suffix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)\s*[\(\[]\s*["'“”‘’]?\s*from\s+(?:the\s+)?(text|knowledge[\s-]*base)\s*["'“”‘’]?\s*[\)\]]\s*$"#,
        )
        .unwrap()
    })
}

fn separator_cell() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^:?-+:?$").unwrap())
}

/// Splits on unescaped `|`, dropping the empty pieces produced by a leading
/// or trailing pipe. Returns `None` when the line has no unescaped pipe.
fn split_cells(line: &str) -> Option<Vec<String>> {
    let trimmed = line.trim();
    let mut pieces = vec![String::new()];
    let mut pipes = 0;
    let mut chars = trimmed.chars().peekable();
    let mut ends_with_pipe = false;
    while let Some(c) = chars.next() {
        ends_with_pipe = false;
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                chars.next();
                pieces.last_mut().unwrap().push('|');
            }
            '|' => {
                pipes += 1;
                ends_with_pipe = true;
                pieces.push(String::new());
            }
            other => pieces.last_mut().unwrap().push(other),
        }
    }
    if pipes == 0 {
        return None;
    }
    if trimmed.starts_with('|') {
        pieces.remove(0);
    }
    if ends_with_pipe {
        pieces.pop();
    }
    Some(pieces.into_iter().map(|p| p.trim().to_string()).collect())
}

fn is_separator(cells: &[String]) -> bool {
    !cells.is_empty() && cells.iter().all(|c| separator_cell().is_match(c))
}

fn read_cell(text: &str) -> TableCell {
    let re = source_suffix();
    if let Some(caps) = re.captures(text) {
        let kind = caps
            .get(1)
            .map(|m| m.as_str().to_ascii_lowercase())
            .unwrap_or_default();
        let source = if kind == "text" {
            MechanismSource::FromText
        } else {
            MechanismSource::FromKnowledgeBase
        };
        let start = caps.get(0).unwrap().start();
        return TableCell {
            text: text[..start].trim().to_string(),
            source: Some(source),
        };
    }
    TableCell::plain(text.trim())
}

/// Parses the table in `raw` into rows of exactly `expected_columns` cells.
pub fn parse_chart_table(
    raw: &str,
    expected_columns: usize,
) -> Result<Vec<Vec<TableCell>>, TableError> {
    // (line number, cells) for every pipe-bearing, non-separator line
    let mut candidates: Vec<(usize, String, Vec<String>)> = Vec::new();
    let mut previous_was_row = false;
    for (idx, line) in raw.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("```") || trimmed.starts_with("~~~") {
            continue;
        }
        let Some(cells) = split_cells(trimmed) else {
            previous_was_row = false;
            continue;
        };
        if is_separator(&cells) {
            if previous_was_row {
                // the row right above a separator is a header
                candidates.pop();
            }
            previous_was_row = false;
            continue;
        }
        candidates.push((idx + 1, trimmed.to_string(), cells));
        previous_was_row = true;
    }
    if candidates.is_empty() {
        return Err(TableError::Empty);
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for (ordinal, (line, raw_line, cells)) in candidates.into_iter().enumerate() {
        if cells.len() != expected_columns {
            return Err(TableError::Row(RowParseError {
                row: ordinal + 1,
                line,
                raw: raw_line,
                expected: expected_columns,
                found: cells.len(),
            }));
        }
        rows.push(cells.iter().map(|c| read_cell(c)).collect());
    }
    Ok(rows)
}

fn escape_cell(text: &str) -> String {
    text.replace('|', "\\|").replace(['\n', '\r'], " ")
}

/// Renders a header, a separator line and the given rows.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let line = |cells: Vec<String>| format!("| {} |\n", cells.join(" | "));
    out.push_str(&line(header.iter().map(|h| escape_cell(h)).collect()));
    out.push_str(&line(header.iter().map(|_| "---".to_string()).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(|c| escape_cell(c)).collect()));
    }
    out
}
