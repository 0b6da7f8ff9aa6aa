//! Helpers for tests that run the pipeline over the six-paper fixture.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hypoforge_core::pipeline::{Pipeline, PipelineConfig, RunOptions, StageOutcome};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/six_papers")
}

/// The fixture configuration with runs and cache under `work`.
pub fn fixture_config(work: &Path) -> PipelineConfig {
    let mut config = PipelineConfig::load(&fixture_dir().join("hypoforge.toml")).unwrap();
    config.paths.runs = work.join("runs");
    config.paths.cache = work.join("cache");
    config
}

/// Runs every stage and returns the run directory.
pub fn run_all(work: &Path) -> (PathBuf, Vec<StageOutcome>) {
    let mut pipeline = Pipeline::new(fixture_config(work)).unwrap();
    let outcomes = pipeline.run_all(&RunOptions::default()).unwrap();
    (outcomes[0].run_dir.clone(), outcomes)
}

/// Run-relative paths of the artifacts a fixture run must reproduce exactly.
pub fn deterministic_artifacts(run_dir: &Path) -> Vec<String> {
    let mut files: Vec<String> = [
        "charts.csv",
        "hypotheses.jsonl",
        "evaluations.jsonl",
        "ideas.json",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut dots: Vec<String> = std::fs::read_dir(run_dir.join("graphs"))
        .unwrap()
        .map(|e| format!("graphs/{}", e.unwrap().file_name().to_string_lossy()))
        .filter(|p| p.ends_with(".dot"))
        .collect();
    dots.sort();
    files.extend(dots);
    files
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    read(path)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
