//! Cross-set hypothesis generation.
//!
//! Every row of a set-A chart is paired with every row of a set-B chart. For
//! each pair the backend is asked, at temperature 1.0, to create an
//! interdependence between the two rows' mechanisms rather than adding their
//! effects. Each sample carries its index in the prompt so that repeated draws
//! are distinct cacheable requests.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::DomainProfile;
use crate::error::{Error, Result};
use crate::extraction::{ChartRow, SystemChart};
use crate::gateway::{FinishReason, Gateway, StageProfile};
use crate::Warned;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowRef {
    pub paper_id: u32,
    pub row_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowPair {
    /// 1-based position in the full cross product.
    pub pair_id: u32,
    pub a: RowRef,
    pub b: RowRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub hypothesis_id: u32,
    pub pair: RowPair,
    pub text: String,
    pub cited_papers: Vec<u32>,
    pub combined_structures: Vec<String>,
}

fn sorted_rows(charts: &[SystemChart]) -> Vec<RowRef> {
    let mut rows: Vec<RowRef> = charts
        .iter()
        .flat_map(|c| {
            c.rows.iter().map(move |r| RowRef {
                paper_id: c.paper_id,
                row_index: r.row_index,
            })
        })
        .collect();
    rows.sort();
    rows
}

/// Full cross product of set-A rows × set-B rows in lexicographic
/// `(paper_id, row_index)` order, or a seeded uniform sample of `cap` pairs
/// from it (kept in the same order).
pub fn enumerate_pairs(
    charts_a: &[SystemChart],
    charts_b: &[SystemChart],
    cap: Option<usize>,
    seed: u64,
) -> Result<Warned<Vec<RowPair>>> {
    let rows_a = sorted_rows(charts_a);
    let rows_b = sorted_rows(charts_b);
    if rows_a.is_empty() || rows_b.is_empty() {
        return Err(Error::Invalid(
            "pairing needs at least one chart row in each set".into(),
        ));
    }
    let papers_a: HashSet<u32> = rows_a.iter().map(|r| r.paper_id).collect();
    if rows_b.iter().any(|r| papers_a.contains(&r.paper_id)) {
        return Err(Error::Invalid("a paper appears in both sets".into()));
    }
    let total = rows_a.len() * rows_b.len();
    let pair_at = |index: usize| RowPair {
        pair_id: index as u32 + 1,
        a: rows_a[index / rows_b.len()],
        b: rows_b[index % rows_b.len()],
    };
    let mut warnings = Vec::new();
    let indices: Vec<usize> = match cap {
        Some(cap) if cap < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, total, cap).into_vec();
            picked.sort_unstable();
            picked
        }
        Some(cap) => {
            if cap > total {
                warnings.push(format!(
                    "pair cap {cap} exceeds the {total} available pairs, using all"
                ));
            }
            (0..total).collect()
        }
        None => (0..total).collect(),
    };
    Ok(Warned::with_warnings(
        indices.into_iter().map(pair_at).collect(),
        warnings,
    ))
}

/// A pair with the row contents and set labels the prompt needs.
#[derive(Debug, Clone, Copy)]
pub struct PairContext<'a> {
    pub pair: RowPair,
    pub row_a: &'a ChartRow,
    pub row_b: &'a ChartRow,
    pub set_a: &'a str,
    pub set_b: &'a str,
}

pub const COMPOUND_CLAUSE: &str =
    "Propose a single \"compound\" rather than a \"composite\": both mechanisms must act \
within one material, not in separate phases placed side by side.";

pub fn generation_prompt(
    ctx: &PairContext<'_>,
    domain: &DomainProfile,
    sample: usize,
    n_samples: usize,
) -> String {
    let mut prompt = format!(
        "Hypothesis generation for {goal}.\n\n\
         Source [{pa}] (paper set \"{sa}\"), row {ra}:\n{row_a}\n\n\
         Source [{pb}] (paper set \"{sb}\"), row {rb}:\n{row_b}\n\n\
         These mechanisms come from different paper sets. Synergistically combine them by suggesting an innovative \
         interaction: create an interdependence in which at least one mechanism positively influences the other, \
         without significant negative impact. Do not propose a simple addition of independent effects.\n",
        goal = domain.design_goal,
        pa = ctx.pair.a.paper_id,
        sa = ctx.set_a,
        ra = ctx.pair.a.row_index,
        row_a = ctx.row_a.linearized(),
        pb = ctx.pair.b.paper_id,
        sb = ctx.set_b,
        rb = ctx.pair.b.row_index,
        row_b = ctx.row_b.linearized(),
    );
    if domain.compound_mode {
        prompt.push_str(COMPOUND_CLAUSE);
        prompt.push('\n');
    }
    prompt.push_str(
        "\nWrite the hypothesis as one paragraph. Mark each sentence that draws on a source with its bracketed \
         source number, for example [3]. Then add two lines:\n\
         Linked mechanisms: <mechanism from the first source> <-> <mechanism from the second source>\n\
         Structural entities: <entity>; <entity>\n",
    );
    prompt.push_str(&format!("\nDraft {} of {}.", sample + 1, n_samples));
    prompt
}

fn citation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+(?:\s*,\s*\d+)*)\]").unwrap())
}

fn entities_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*\**\s*structural entities\s*\**\s*:\s*(.*)$").unwrap())
}

/// All distinct bracketed integers, ascending.
pub fn bracketed_citations(text: &str) -> Vec<u32> {
    let found: BTreeSet<u32> = citation_re()
        .captures_iter(text)
        .flat_map(|c| {
            c[1].split(',')
                .filter_map(|n| n.trim().parse::<u32>().ok())
                .collect::<Vec<_>>()
        })
        .collect();
    found.into_iter().collect()
}

/// Splits a `;`- or `,`-separated list, preferring `;` when present.
pub(crate) fn split_list(text: &str) -> Vec<String> {
    let sep = if text.contains(';') { ';' } else { ',' };
    text.split(sep)
        .map(|s| s.trim().trim_end_matches('.').trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Extracts the hypothesis text, its citation markers and the
/// `Structural entities:` line. The id is assigned later by [`assign_ids`].
pub fn parse_hypothesis(raw: &str, pair: RowPair) -> Result<Warned<Hypothesis>> {
    let mut warnings = Vec::new();
    let mut combined_structures = Vec::new();
    let mut kept = Vec::new();
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        if let Some(caps) = entities_re().captures(line) {
            combined_structures.extend(split_list(&caps[1]));
        } else {
            kept.push(line);
        }
    }
    let text = kept.join("\n").trim().to_string();
    if text.is_empty() {
        return Err(Error::Parse("hypothesis reply has no text".into()));
    }
    let cited_papers = bracketed_citations(&text);
    if cited_papers.is_empty() {
        warnings.push(format!(
            "pair {}: hypothesis carries no citation markers",
            pair.pair_id
        ));
    }
    Ok(Warned::with_warnings(
        Hypothesis {
            hypothesis_id: 0,
            pair,
            text,
            cited_papers,
            combined_structures,
        },
        warnings,
    ))
}

/// `n_samples` independent hypotheses for one pair. Unparseable samples are
/// skipped with a warning; gateway failures abort.
pub fn generate_for_pair(
    ctx: &PairContext<'_>,
    n_samples: usize,
    domain: &DomainProfile,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<Vec<Hypothesis>>> {
    if n_samples == 0 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    if profile.temperature != 1.0 {
        warnings.push(format!(
            "generation running at temperature {} instead of 1.0",
            profile.temperature
        ));
    }
    let mut hypotheses = Vec::with_capacity(n_samples);
    for sample in 0..n_samples {
        let request = profile.request(generation_prompt(ctx, domain, sample, n_samples));
        let reply = gateway.complete(&request)?;
        if reply.finish_reason == FinishReason::Truncated {
            warnings.push(format!(
                "pair {} draft {}: reply truncated",
                ctx.pair.pair_id,
                sample + 1
            ));
        }
        match parse_hypothesis(&reply.text, ctx.pair) {
            Ok(parsed) => {
                warnings.extend(parsed.warnings);
                hypotheses.push(parsed.value);
            }
            Err(e) => warnings.push(format!(
                "pair {} draft {}: {e}",
                ctx.pair.pair_id,
                sample + 1
            )),
        }
    }
    if hypotheses.is_empty() {
        warnings.push(format!(
            "pair {}: no sample parsed, pair skipped",
            ctx.pair.pair_id
        ));
    }
    Ok(Warned::with_warnings(hypotheses, warnings))
}

/// Flattens per-pair batches and numbers the hypotheses 1..N.
pub fn assign_ids(batches: Vec<Vec<Hypothesis>>) -> Vec<Hypothesis> {
    batches
        .into_iter()
        .flatten()
        .zip(1u32..)
        .map(|(mut h, id)| {
            h.hypothesis_id = id;
            h
        })
        .collect()
}
