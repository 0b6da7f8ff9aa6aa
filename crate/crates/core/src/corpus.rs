//! Paper-set ingestion and run manifests.
//!
//! A corpus manifest names two or more keyword-labeled sets of papers, each
//! paper pointing at a UTF-8 text file. Paper ids are assigned 1-based in
//! manifest order and are the numbers that later appear in bracketed
//! citation markers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::Warned;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: u32,
    pub set_label: String,
    pub title: String,
    pub venue: String,
    pub year: i32,
    pub body_text: String,
    pub token_estimate: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperSet {
    pub label: String,
    pub paper_ids: Vec<u32>,
}

/// Read-only view of the ingested papers. Set order is manifest order; the
/// first set is "set A" for pairing and coloring purposes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStore {
    pub papers: Vec<PaperRecord>,
    pub sets: Vec<PaperSet>,
}

impl CorpusStore {
    pub fn paper(&self, paper_id: u32) -> Option<&PaperRecord> {
        // ids are dense and 1-based, but fall back to a scan for stores built by hand
        self.papers
            .get((paper_id as usize).wrapping_sub(1))
            .filter(|p| p.paper_id == paper_id)
            .or_else(|| self.papers.iter().find(|p| p.paper_id == paper_id))
    }

    pub fn set_of(&self, paper_id: u32) -> Option<usize> {
        self.sets
            .iter()
            .position(|s| s.paper_ids.contains(&paper_id))
    }

    pub fn paper_ids(&self) -> BTreeSet<u32> {
        self.papers.iter().map(|p| p.paper_id).collect()
    }

    /// Checks the store invariants: unique ids, non-empty labels and bodies,
    /// and every paper in exactly one set.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for paper in &self.papers {
            if !seen.insert(paper.paper_id) {
                return Err(Error::Corpus(format!(
                    "duplicate paper_id {}",
                    paper.paper_id
                )));
            }
            if paper.set_label.trim().is_empty() {
                return Err(Error::Corpus(format!(
                    "paper {} has an empty set label",
                    paper.paper_id
                )));
            }
            if paper.body_text.trim().is_empty() {
                return Err(Error::Corpus(format!(
                    "paper {} has an empty body",
                    paper.paper_id
                )));
            }
        }
        let mut membership: BTreeMap<u32, usize> = BTreeMap::new();
        for set in &self.sets {
            for id in &set.paper_ids {
                *membership.entry(*id).or_default() += 1;
            }
        }
        for id in &seen {
            match membership.get(id) {
                Some(1) => {}
                Some(n) => {
                    return Err(Error::Corpus(format!("paper {id} appears in {n} sets")));
                }
                None => return Err(Error::Corpus(format!("paper {id} belongs to no set"))),
            }
        }
        if membership.len() != seen.len() {
            return Err(Error::Corpus("a set references an unknown paper id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CorpusManifest {
    pub sets: Vec<ManifestSet>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ManifestSet {
    pub label: String,
    pub papers: Vec<ManifestPaper>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ManifestPaper {
    pub title: String,
    #[serde(default)]
    pub venue: String,
    #[serde(default)]
    pub year: i32,
    pub file: String,
}

/// Approximate token count: whitespace-delimited words times 4/3, rounded down.
pub fn token_estimate(text: &str) -> usize {
    text.split_whitespace().count() * 4 / 3
}

/// Loads the manifest at `manifest_path` and the paper texts under `text_root`.
pub fn ingest_corpus(manifest_path: &Path, text_root: &Path) -> Result<Warned<CorpusStore>> {
    let manifest: CorpusManifest = fsutil::read_json(manifest_path)?;
    build_store(&manifest, |file| {
        let path = text_root.join(file);
        std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
    })
}

/// Builds a store from an already-parsed manifest, resolving each paper's
/// `file` through `load_text`.
pub fn build_store(
    manifest: &CorpusManifest,
    mut load_text: impl FnMut(&str) -> Result<String>,
) -> Result<Warned<CorpusStore>> {
    if manifest.sets.len() < 2 {
        return Err(Error::Corpus(format!(
            "need ≥2 sets, manifest has {}",
            manifest.sets.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut papers = Vec::new();
    let mut sets = Vec::new();
    let mut labels = HashSet::new();
    let mut next_id = 1u32;

    for set in &manifest.sets {
        let label = set.label.trim();
        if label.is_empty() {
            return Err(Error::Corpus("set label must be non-empty".into()));
        }
        if !labels.insert(label.to_string()) {
            return Err(Error::Corpus(format!("set `{label}` is listed twice")));
        }
        if set.papers.is_empty() {
            return Err(Error::Corpus(format!("set `{label}` is empty")));
        }
        let mut titles = HashSet::new();
        let mut ids = Vec::with_capacity(set.papers.len());
        for entry in &set.papers {
            if !titles.insert(entry.title.trim().to_lowercase()) {
                let msg = format!("set `{label}`: duplicate title `{}`", entry.title);
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            let body = load_text(&entry.file).map_err(|e| {
                Error::Corpus(format!("paper `{}` (set `{label}`): {e}", entry.title))
            })?;
            if body.trim().is_empty() {
                return Err(Error::Corpus(format!(
                    "paper `{}` (set `{label}`): text file `{}` is empty",
                    entry.title, entry.file
                )));
            }
            let paper_id = next_id;
            next_id += 1;
            ids.push(paper_id);
            papers.push(PaperRecord {
                paper_id,
                set_label: label.to_string(),
                title: entry.title.clone(),
                venue: entry.venue.clone(),
                year: entry.year,
                token_estimate: token_estimate(&body),
                body_text: body,
            });
        }
        sets.push(PaperSet {
            label: label.to_string(),
            paper_ids: ids,
        });
    }
    let store = CorpusStore { papers, sets };
    store.validate()?;
    Ok(Warned::with_warnings(store, warnings))
}

/// Ties a run directory to the configuration and backend that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: serde_json::Value,
    pub backend_id: String,
    /// Stage name to the run-relative paths that stage wrote.
    pub stages: BTreeMap<String, Vec<String>>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }
}
