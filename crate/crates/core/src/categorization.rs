//! Two-step categorization of the Strong∧Synergistic pool into ideas.
//!
//! The pool is split into contiguous chunks, each chunk is categorized on its
//! own, and a single merge conversation combines the per-chunk ideas. The
//! merge may span several replies through a continuation prompt and stops as
//! soon as the idea count exceeds the cap. Hypotheses that no final idea
//! mentions are reported as dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{EvaluationRecord, SynergyEvaluation};
use crate::extraction::complete_with_repair;
use crate::extraction::table::{parse_chart_table, render_table, TableError};
use crate::gateway::{Gateway, StageProfile};
use crate::generation::{split_list, Hypothesis};
use crate::Warned;

pub const DEFAULT_CHUNKS: usize = 5;
pub const DEFAULT_IDEA_CAP: usize = 50;
pub const DEFAULT_TURN_BUDGET: usize = 10;
pub const END_MARKER: &str = "END OF IDEAS";
pub const IDEA_HEADER: [&str; 4] = ["Idea", "Hypotheses", "Structural entities", "Core concept"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Idea {
    pub idea_id: u32,
    pub member_hypotheses: Vec<u32>,
    pub structural_entities: Vec<String>,
    pub core_concept: String,
    /// (set-A paper, set-B paper) for every member.
    pub source_pair_signature: BTreeSet<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStatus {
    Complete,
    /// The idea count exceeded the cap after a reply.
    Halted,
    TurnBudgetExhausted,
    ParseFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorizationState {
    pub ideas: Vec<Idea>,
    pub halted: bool,
    pub status: MergeStatus,
    pub dropped_hypotheses: Vec<u32>,
    pub turns: usize,
}

/// A pool member: the hypothesis and the synergy judgment that admitted it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub hypothesis: Hypothesis,
    pub synergy: SynergyEvaluation,
}

impl PoolEntry {
    pub fn id(&self) -> u32 {
        self.hypothesis.hypothesis_id
    }

    pub fn signature(&self) -> (u32, u32) {
        (
            self.hypothesis.pair.a.paper_id,
            self.hypothesis.pair.b.paper_id,
        )
    }

    fn entities(&self) -> Vec<String> {
        if self.synergy.core_structures.is_empty() {
            self.hypothesis.combined_structures.clone()
        } else {
            self.synergy.core_structures.clone()
        }
    }
}

/// Hypotheses judged both Strong and Synergistic, ordered by id.
pub fn filter_pool(
    hypotheses: &[Hypothesis],
    evaluations: &[EvaluationRecord],
) -> Warned<Vec<PoolEntry>> {
    let mut warnings = Vec::new();
    if evaluations.is_empty() {
        warnings.push("no evaluations available, pool is empty".into());
    }
    let by_id: HashMap<u32, &EvaluationRecord> =
        evaluations.iter().map(|r| (r.hypothesis_id, r)).collect();
    let mut unevaluated = 0;
    let mut pool: Vec<PoolEntry> = hypotheses
        .iter()
        .filter_map(|h| {
            let record = by_id.get(&h.hypothesis_id);
            if !record.is_some_and(|r| r.is_evaluated()) {
                unevaluated += 1;
                return None;
            }
            let record = record.unwrap();
            record.is_strong_synergistic().then(|| PoolEntry {
                hypothesis: h.clone(),
                synergy: record.synergy.clone().unwrap(),
            })
        })
        .collect();
    if unevaluated > 0 && !evaluations.is_empty() {
        warnings.push(format!(
            "{unevaluated} unevaluated hypotheses excluded from the pool"
        ));
    }
    pool.sort_by_key(PoolEntry::id);
    Warned::with_warnings(pool, warnings)
}

/// Contiguous, order-preserving split into `k` chunks whose sizes differ by
/// at most one, larger chunks first.
pub fn chunk_pool<T: Clone>(pool: &[T], k: usize) -> Result<Warned<Vec<Vec<T>>>> {
    if pool.is_empty() {
        return Err(Error::Invalid("cannot chunk an empty pool".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("chunk count must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    let k = if k > pool.len() {
        warnings.push(format!(
            "chunk count {k} exceeds pool size {}, using {} singleton chunks",
            pool.len(),
            pool.len()
        ));
        pool.len()
    } else {
        k
    };
    let (base, extra) = (pool.len() / k, pool.len() % k);
    let mut chunks = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        chunks.push(pool[start..start + len].to_vec());
        start += len;
    }
    Ok(Warned::with_warnings(chunks, warnings))
}

fn id_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

/// An idea row as the model wrote it, before membership checks.
#[derive(Debug, Clone, PartialEq, Eq)]
struct RawIdea {
    members: Vec<u32>,
    entities: Vec<String>,
    concept: String,
}

fn parse_idea_rows(raw: &str) -> std::result::Result<Vec<RawIdea>, TableError> {
    let rows = parse_chart_table(raw, IDEA_HEADER.len())?;
    Ok(rows
        .into_iter()
        .map(|cells| RawIdea {
            members: id_re()
                .find_iter(&cells[1].raw())
                .filter_map(|m| m.as_str().parse().ok())
                .collect(),
            entities: split_list(&cells[2].raw()),
            concept: cells[3].raw(),
        })
        .collect())
}

/// Keeps members that belong to `allowed` and are not yet claimed, in first
/// come order. Ideas left without members are discarded.
fn admit(
    raw: Vec<RawIdea>,
    allowed: &BTreeMap<u32, (u32, u32)>,
    claimed: &mut BTreeSet<u32>,
    warnings: &mut Vec<String>,
) -> Vec<Idea> {
    let mut ideas = Vec::new();
    for r in raw {
        let mut members = BTreeSet::new();
        for id in r.members {
            if !allowed.contains_key(&id) {
                warnings.push(format!("idea lists unknown hypothesis {id}, ignored"));
            } else if !claimed.insert(id) {
                warnings.push(format!(
                    "hypothesis {id} listed in two ideas, kept in the first"
                ));
            } else {
                members.insert(id);
            }
        }
        if members.is_empty() {
            warnings.push(format!(
                "idea `{}` has no admissible members, discarded",
                r.concept
            ));
            continue;
        }
        ideas.push(Idea {
            idea_id: 0,
            source_pair_signature: members.iter().map(|id| allowed[id]).collect(),
            member_hypotheses: members.into_iter().collect(),
            structural_entities: r.entities,
            core_concept: r.concept,
        });
    }
    ideas
}

fn renumber(ideas: &mut [Idea]) {
    for (idea, id) in ideas.iter_mut().zip(1u32..) {
        idea.idea_id = id;
    }
}

fn table_instructions() -> String {
    format!(
        "Reply with a pipe-delimited table with the columns {}. List every hypothesis number that belongs to an idea \
         in the Hypotheses column, separated by commas. Each hypothesis belongs to at most one idea.",
        IDEA_HEADER.join(" | ")
    )
}

pub fn chunk_prompt(chunk: &[PoolEntry]) -> String {
    let mut prompt = String::from(
        "Hypothesis categorization. Group the hypotheses below into distinct ideas. Hypotheses that combine the same \
         papers, share core structural entities, and describe similar synergistic mechanisms belong to one idea.\n\n",
    );
    for entry in chunk {
        let (a, b) = entry.signature();
        prompt.push_str(&format!(
            "Hypothesis {id}\nCombined papers: [{a}] and [{b}]\nCore structural entities: {entities}\nSynergistic sentences: {sentences}\n\n",
            id = entry.id(),
            entities = entry.entities().join("; "),
            sentences = entry
                .synergy
                .interdependence_sentences
                .iter()
                .map(|s| format!("\"{s}\""))
                .collect::<Vec<_>>()
                .join(" "),
        ));
    }
    prompt.push_str(&table_instructions());
    prompt
}

/// Initial categorization of one chunk. A singleton chunk becomes one idea
/// without a backend call.
pub fn categorize_chunk(
    chunk: &[PoolEntry],
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<Vec<Idea>>> {
    if chunk.is_empty() {
        return Err(Error::Invalid("cannot categorize an empty chunk".into()));
    }
    let allowed: BTreeMap<u32, (u32, u32)> =
        chunk.iter().map(|e| (e.id(), e.signature())).collect();
    let mut warnings = Vec::new();
    if let [only] = chunk {
        let mut ideas = vec![Idea {
            idea_id: 0,
            member_hypotheses: vec![only.id()],
            structural_entities: only.entities(),
            core_concept: only
                .synergy
                .interdependence_sentences
                .first()
                .cloned()
                .unwrap_or_else(|| only.hypothesis.text.clone()),
            source_pair_signature: BTreeSet::from([only.signature()]),
        }];
        renumber(&mut ideas);
        return Ok(Warned::new(ideas));
    }
    let outcome = complete_with_repair(
        gateway,
        profile.request(chunk_prompt(chunk)),
        |raw| {
            let rows = parse_idea_rows(raw).map_err(|e| e.to_string())?;
            if rows.iter().all(|r| r.members.is_empty()) {
                return Err("no idea lists a hypothesis number".into());
            }
            Ok(rows)
        },
        |e| {
            format!(
                "Your previous reply could not be parsed: {e}. {}",
                table_instructions()
            )
        },
    )?;
    let mut ideas = match outcome {
        Ok(rows) => admit(rows, &allowed, &mut BTreeSet::new(), &mut warnings),
        Err((digest, reason)) => {
            warnings.push(format!(
                "chunk starting at hypothesis {}: {reason} (request {digest}), members dropped",
                chunk[0].id()
            ));
            Vec::new()
        }
    };
    renumber(&mut ideas);
    Ok(Warned::with_warnings(ideas, warnings))
}

pub fn merge_prompt(ideas: &[Idea]) -> String {
    let rows: Vec<Vec<String>> = ideas
        .iter()
        .map(|i| {
            vec![
                i.idea_id.to_string(),
                join_ids(&i.member_hypotheses),
                i.structural_entities.join(", "),
                i.core_concept.clone(),
            ]
        })
        .collect();
    let signatures: String = ideas
        .iter()
        .map(|i| {
            let pairs: Vec<String> = i
                .source_pair_signature
                .iter()
                .map(|(a, b)| format!("[{a}]+[{b}]"))
                .collect();
            format!("Idea {}: {}\n", i.idea_id, pairs.join(", "))
        })
        .collect();
    format!(
        "Final hypothesis categorization. Merge the ideas below that have similar combined paper numbers, core \
         structural entities and concepts. Keep every hypothesis number of a merged idea.\n\n{}\nCombined papers per idea:\n{}\n\
         {} Number the merged ideas from 1. When the list is complete, write {END_MARKER} on its own line.",
        render_table(&IDEA_HEADER, &rows),
        signatures,
        table_instructions()
    )
}

pub const CONTINUATION_PROMPT: &str =
    "Continue the table from the next idea, using the same columns. Write END OF IDEAS when the list is complete.";

fn join_ids(ids: &[u32]) -> String {
    ids.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeSettings {
    pub cap: usize,
    pub turn_budget: usize,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self {
            cap: DEFAULT_IDEA_CAP,
            turn_budget: DEFAULT_TURN_BUDGET,
        }
    }
}

/// Final categorization over the per-chunk ideas, carried into the prompt
/// with their memberships verbatim. `pool` is the full categorization pool,
/// so members lost at the chunk step also count as dropped.
pub fn merge_ideas(
    per_chunk: &[Vec<Idea>],
    pool: &[PoolEntry],
    settings: MergeSettings,
    profile: &StageProfile,
    gateway: &Gateway,
) -> Result<Warned<CategorizationState>> {
    let mut combined: Vec<Idea> = per_chunk.iter().flatten().cloned().collect();
    if combined.is_empty() {
        return Err(Error::Invalid("merge needs at least one idea".into()));
    }
    if settings.turn_budget == 0 {
        return Err(Error::Invalid("turn budget must be at least 1".into()));
    }
    renumber(&mut combined);
    let pool: BTreeMap<u32, (u32, u32)> = pool.iter().map(|e| (e.id(), e.signature())).collect();

    let mut warnings = Vec::new();
    let mut claimed = BTreeSet::new();
    let mut ideas: Vec<Idea> = Vec::new();
    let mut request = profile.request(merge_prompt(&combined));
    let mut repaired = false;
    let mut turns = 0;
    let status = loop {
        if turns == settings.turn_budget {
            warnings.push(format!(
                "merge stopped after the turn budget of {} replies",
                settings.turn_budget
            ));
            break MergeStatus::TurnBudgetExhausted;
        }
        let reply = gateway.complete(&request)?;
        turns += 1;
        let finished = reply.text.contains(END_MARKER);
        let parsed = match parse_idea_rows(&reply.text) {
            Ok(rows) => Ok(rows),
            Err(TableError::Empty) if finished => Ok(Vec::new()),
            Err(e) => Err(e),
        };
        match parsed {
            Ok(rows) => {
                ideas.extend(admit(rows, &pool, &mut claimed, &mut warnings));
                if ideas.len() > settings.cap {
                    warnings.push(format!(
                        "merge halted: {} ideas exceed the cap of {}",
                        ideas.len(),
                        settings.cap
                    ));
                    break MergeStatus::Halted;
                }
                if finished {
                    break MergeStatus::Complete;
                }
                request = request.follow_up(&reply.text, CONTINUATION_PROMPT);
            }
            Err(e) if !repaired => {
                repaired = true;
                request = request.follow_up(
                    &reply.text,
                    format!(
                        "Your previous reply could not be parsed: {e}. {}",
                        table_instructions()
                    ),
                );
            }
            Err(e) => {
                warnings.push(format!(
                    "merge reply could not be parsed after a reprompt: {e}"
                ));
                break MergeStatus::ParseFailed;
            }
        }
    };
    renumber(&mut ideas);
    let dropped_hypotheses: Vec<u32> = pool
        .keys()
        .filter(|id| !claimed.contains(id))
        .copied()
        .collect();
    Ok(Warned::with_warnings(
        CategorizationState {
            ideas,
            halted: status == MergeStatus::Halted,
            status,
            dropped_hypotheses,
            turns,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub pool_size: usize,
    pub covered: usize,
    pub dropped: usize,
    pub loss_fraction: f64,
    pub idea_count: usize,
    pub idea_sizes: BTreeMap<u32, usize>,
    pub halted: bool,
    pub status: MergeStatus,
}

pub fn coverage_report(state: &CategorizationState, pool: &[u32]) -> CoverageReport {
    let pool_set: BTreeSet<u32> = pool.iter().copied().collect();
    let covered = state
        .ideas
        .iter()
        .flat_map(|i| i.member_hypotheses.iter())
        .filter(|id| pool_set.contains(id))
        .count();
    let dropped = pool_set.len() - covered;
    CoverageReport {
        pool_size: pool_set.len(),
        covered,
        dropped,
        loss_fraction: if pool_set.is_empty() {
            0.0
        } else {
            dropped as f64 / pool_set.len() as f64
        },
        idea_count: state.ideas.len(),
        idea_sizes: state
            .ideas
            .iter()
            .map(|i| (i.idea_id, i.member_hypotheses.len()))
            .collect(),
        halted: state.halted,
        status: state.status,
    }
}
