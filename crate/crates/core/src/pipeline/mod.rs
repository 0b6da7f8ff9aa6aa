//! Stage orchestration over run directories.
//!
//! A run lives in `runs/<run_id>/` and records, in `manifest.json`, which
//! stages completed and which files each wrote. The run id is a digest of the
//! output-relevant configuration and the ingested corpus, so identical inputs
//! map to the same base id; a new run with the same inputs gets a `-2`, `-3`
//! suffix unless `--resume` is given. One process owns a run at a time
//! through a lock file.

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::*;
pub use report::{
    build_report, render_report, ReportInputs, RunReport, SetCount, IDEA_TABLE_HEADER,
};

use crate::categorization::{
    categorize_chunk, chunk_pool, coverage_report, filter_pool, merge_ideas, CategorizationState,
    CoverageReport, Idea, MergeStatus,
};
use crate::corpus::{ingest_corpus, CorpusStore, RunManifest};
use crate::domain::DomainProfile;
use crate::error::{Error, Result};
use crate::evaluation::audit::{
    build_audit_report, read_annotations, AuditReport, ChartAuditInput,
};
use crate::evaluation::{evaluate_hypothesis, EvaluationRecord};
use crate::extraction::{charts_csv, extract_chart, validate_chart, ChartRow, SystemChart};
use crate::fsutil;
use crate::gateway::{
    build_profile, Backend, Gateway, HttpBackend, RecordReplay, ScriptedBackend, Stage,
    StageProfile,
};
use crate::generation::{assign_ids, enumerate_pairs, generate_for_pair, Hypothesis, PairContext};
use crate::visualization::{
    build_chart_graph, build_hypothesis_graph, emit_dot, fill_na, split_combined_rows,
    tag_and_simplify, Origin,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PipelineStage {
    Ingest,
    Extract,
    Generate,
    Evaluate,
    Categorize,
    Visualize,
    Audit,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 8] = [
        PipelineStage::Ingest,
        PipelineStage::Extract,
        PipelineStage::Generate,
        PipelineStage::Evaluate,
        PipelineStage::Categorize,
        PipelineStage::Visualize,
        PipelineStage::Audit,
        PipelineStage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Ingest => "ingest",
            PipelineStage::Extract => "extract",
            PipelineStage::Generate => "generate",
            PipelineStage::Evaluate => "evaluate",
            PipelineStage::Categorize => "categorize",
            PipelineStage::Visualize => "visualize",
            PipelineStage::Audit => "audit",
            PipelineStage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn prerequisites(self) -> &'static [PipelineStage] {
        use PipelineStage::*;
        match self {
            Ingest => &[],
            Extract => &[Ingest],
            Generate => &[Ingest, Extract],
            Evaluate => &[Generate],
            Categorize => &[Generate, Evaluate],
            Visualize => &[Ingest, Extract, Generate, Evaluate],
            Audit => &[Evaluate],
            Report => &[Ingest, Extract, Generate, Evaluate, Categorize],
        }
    }

    fn uses_backend(self) -> bool {
        matches!(
            self,
            PipelineStage::Extract
                | PipelineStage::Generate
                | PipelineStage::Evaluate
                | PipelineStage::Categorize
                | PipelineStage::Visualize
        )
    }

    /// Stages that read this stage's outputs, directly or transitively.
    fn dependents(self) -> Vec<PipelineStage> {
        let mut out: Vec<PipelineStage> = Vec::new();
        let mut frontier = vec![self];
        while let Some(s) = frontier.pop() {
            for candidate in PipelineStage::ALL {
                let reads = candidate.prerequisites().contains(&s)
                    || (candidate == PipelineStage::Report && s == PipelineStage::Audit);
                if reads && !out.contains(&candidate) {
                    out.push(candidate);
                    frontier.push(candidate);
                }
            }
        }
        out
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PipelineStage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub run_id: Option<String>,
    pub resume: bool,
    /// Extra hypothesis graph to emit during `visualize`.
    pub hypothesis: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: PipelineStage,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    /// Already complete in a resumed run.
    pub skipped: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATEST_FILE: &str = "LATEST";
const LOCK_FILE: &str = ".lock";

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An open, locked run directory.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    _lock: RunLock,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn has(&self, stage: PipelineStage) -> bool {
        self.manifest.stages.contains_key(stage.as_str())
    }

    fn require(&self, stage: PipelineStage) -> Result<()> {
        match stage.prerequisites().iter().find(|p| !self.has(**p)) {
            Some(missing) => Err(Error::MissingPrerequisite {
                stage: stage.as_str(),
                requires: missing.as_str(),
            }),
            None => Ok(()),
        }
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        fsutil::read_json(&self.path(rel))
    }

    fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        let path = self.path(rel);
        fsutil::read_to_string(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(&path, e)))
            .collect()
    }

    fn outputs_of(&self, stage: PipelineStage) -> &[String] {
        self.manifest
            .stages
            .get(stage.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.path(MANIFEST_FILE))
    }

    /// Records a finished stage and forgets stages that read its old outputs.
    fn complete(&mut self, stage: PipelineStage, outputs: Vec<String>) -> Result<()> {
        for dependent in stage.dependents() {
            self.manifest.stages.remove(dependent.as_str());
        }
        self.manifest
            .stages
            .insert(stage.as_str().to_string(), outputs);
        self.save_manifest()
    }
}

/// Collects the files a stage writes.
struct Writer<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            outputs: Vec::new(),
        }
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        fsutil::write_atomic(&self.dir.join(rel), text.as_bytes())?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        fsutil::write_json(&self.dir.join(rel), value)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<()> {
        let path = self.dir.join(rel);
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).map_err(|e| Error::json(&path, e))?);
            text.push('\n');
        }
        self.text(rel, &text)
    }

    fn warnings(&mut self, stage: PipelineStage, warnings: &[String]) -> Result<()> {
        let mut text = warnings.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        self.text(&format!("warnings/{stage}.txt"), &text)
    }
}

struct Gateways {
    primary: Gateway,
    eval: Gateway,
}

impl Gateways {
    fn backend_id(&self) -> String {
        if self.primary.backend_id() == self.eval.backend_id() {
            self.primary.backend_id().to_string()
        } else {
            format!("{} + {}", self.primary.backend_id(), self.eval.backend_id())
        }
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    domain: DomainProfile,
    gateways: Option<Gateways>,
}

fn env_key(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|k| !k.trim().is_empty())
}

impl Pipeline {
    /// Validates the configuration; no backend is contacted.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        for warning in config.temperature_deviations() {
            tracing::warn!("{warning}");
        }
        let domain = config.domain_profile()?;
        Ok(Self {
            config,
            domain,
            gateways: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn gateways(&mut self) -> Result<&Gateways> {
        if self.gateways.is_none() {
            self.config.validate_backend()?;
            let c = &self.config;
            let timeout = Duration::from_secs(c.backend.timeout_secs);
            let (primary, eval): (Arc<dyn Backend>, Arc<dyn Backend>) = match c.backend.kind {
                BackendKind::Live => {
                    let base = c.backend.base_url.clone().unwrap_or_default();
                    let primary: Arc<dyn Backend> =
                        Arc::new(HttpBackend::new(&base, env_key(API_KEY_ENV), timeout));
                    let eval: Arc<dyn Backend> = match &c.eval_backend.base_url {
                        Some(url) => Arc::new(HttpBackend::new(
                            url,
                            env_key(EVAL_API_KEY_ENV).or_else(|| env_key(API_KEY_ENV)),
                            timeout,
                        )),
                        None => primary.clone(),
                    };
                    (primary, eval)
                }
                BackendKind::Scripted => {
                    let dir = c.fixtures_dir().unwrap_or_default();
                    let backend: Arc<dyn Backend> = Arc::new(ScriptedBackend::from_dir(&dir)?);
                    (backend.clone(), backend)
                }
                BackendKind::Replay => {
                    let backend: Arc<dyn Backend> = Arc::new(RecordReplay::replay(c.cache_dir()));
                    (backend.clone(), backend)
                }
            };
            let build = |backend: Arc<dyn Backend>| {
                Gateway::new(backend)
                    .with_cache(c.cache_dir())
                    .with_retry(c.retry_policy())
                    .with_max_in_flight(c.backend.max_in_flight)
            };
            self.gateways = Some(Gateways {
                primary: build(primary),
                eval: build(eval),
            });
        }
        Ok(self.gateways.as_ref().unwrap())
    }

    fn profile(&self, stage: Stage) -> Result<StageProfile> {
        build_profile(stage, &self.domain, &self.config.profile_config())
    }

    fn base_run_id(&self, store: &CorpusStore) -> String {
        let identity = serde_json::json!({
            "config": self.config.identity(),
            "corpus": store,
        });
        let digest = Sha256::digest(identity.to_string().as_bytes());
        format!("run-{}", &hex::encode(digest)[..12])
    }

    fn write_latest(&self, run_id: &str) -> Result<()> {
        fsutil::write_atomic(
            &self.config.runs_dir().join(LATEST_FILE),
            format!("{run_id}\n").as_bytes(),
        )
    }

    /// The run for `ingest`/`all`: fresh unless resuming an existing one.
    fn open_for_ingest(&self, store: &CorpusStore, opts: &RunOptions) -> Result<(Run, bool)> {
        let runs = self.config.runs_dir();
        let base = opts
            .run_id
            .clone()
            .unwrap_or_else(|| self.base_run_id(store));
        let mut run_id = base.clone();
        let exists = |id: &str| runs.join(id).join(MANIFEST_FILE).exists();
        let resumed = opts.resume && exists(&base);
        if !resumed {
            if opts.run_id.is_some() && exists(&base) {
                return Err(Error::Config(format!(
                    "run `{base}` already exists; pass --resume to continue it"
                )));
            }
            let mut n = 2;
            while runs.join(&run_id).exists() {
                run_id = format!("{base}-{n}");
                n += 1;
            }
        }
        let dir = runs.join(&run_id);
        let lock = RunLock::acquire(&dir)?;
        let manifest = if resumed {
            RunManifest::load(&dir.join(MANIFEST_FILE))?
        } else {
            RunManifest {
                run_id: run_id.clone(),
                config: self.config.identity(),
                backend_id: String::new(),
                stages: BTreeMap::new(),
            }
        };
        Ok((
            Run {
                dir,
                manifest,
                _lock: lock,
            },
            resumed,
        ))
    }

    fn open_existing(&self, opts: &RunOptions) -> Result<Run> {
        let runs = self.config.runs_dir();
        let run_id = match &opts.run_id {
            Some(id) => id.clone(),
            None => fs::read_to_string(runs.join(LATEST_FILE))
                .map(|s| s.trim().to_string())
                .map_err(|_| Error::UnknownRun("(no run yet; run `ingest` first)".into()))?,
        };
        let dir = runs.join(&run_id);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::UnknownRun(run_id));
        }
        let lock = RunLock::acquire(&dir)?;
        let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
        if manifest.config != self.config.identity() {
            tracing::warn!(run = %run_id, "configuration differs from the one that created this run");
        }
        Ok(Run {
            dir,
            manifest,
            _lock: lock,
        })
    }

    fn ingest_store(&self) -> Result<crate::Warned<CorpusStore>> {
        ingest_corpus(&self.config.manifest_path(), &self.config.text_root())
    }

    /// Runs a single stage. `ingest` starts a run; every other stage works on
    /// `--run-id` or the latest run.
    pub fn run_stage(&mut self, stage: PipelineStage, opts: &RunOptions) -> Result<StageOutcome> {
        if stage == PipelineStage::Ingest {
            let store = self.ingest_store()?;
            let (mut run, _) = self.open_for_ingest(&store.value, opts)?;
            self.write_latest(&run.manifest.run_id)?;
            return self.execute_ingest(&mut run, store);
        }
        let mut run = self.open_existing(opts)?;
        self.execute(stage, &mut run, opts)
    }

    /// Runs every stage in order. With `--resume`, stages already recorded
    /// in the run manifest are skipped.
    pub fn run_all(&mut self, opts: &RunOptions) -> Result<Vec<StageOutcome>> {
        let store = self.ingest_store()?;
        let (mut run, resumed) = self.open_for_ingest(&store.value, opts)?;
        self.write_latest(&run.manifest.run_id)?;
        let mut outcomes = Vec::new();
        let mut store = Some(store);
        for stage in PipelineStage::ALL {
            if resumed && run.has(stage) {
                outcomes.push(StageOutcome {
                    stage,
                    run_id: run.manifest.run_id.clone(),
                    run_dir: run.dir.clone(),
                    outputs: run.outputs_of(stage).to_vec(),
                    warnings: Vec::new(),
                    skipped: true,
                });
                continue;
            }
            let outcome = if stage == PipelineStage::Ingest {
                self.execute_ingest(&mut run, store.take().unwrap())?
            } else {
                self.execute(stage, &mut run, opts)?
            };
            outcomes.push(outcome);
        }
        Ok(outcomes)
    }

    fn execute_ingest(
        &mut self,
        run: &mut Run,
        store: crate::Warned<CorpusStore>,
    ) -> Result<StageOutcome> {
        let mut w = Writer::new(&run.dir);
        w.json("corpus.json", &store.value)?;
        w.warnings(PipelineStage::Ingest, &store.warnings)?;
        let outputs = w.outputs;
        run.complete(PipelineStage::Ingest, outputs.clone())?;
        Ok(StageOutcome {
            stage: PipelineStage::Ingest,
            run_id: run.manifest.run_id.clone(),
            run_dir: run.dir.clone(),
            outputs,
            warnings: store.warnings,
            skipped: false,
        })
    }

    fn execute(
        &mut self,
        stage: PipelineStage,
        run: &mut Run,
        opts: &RunOptions,
    ) -> Result<StageOutcome> {
        run.require(stage)?;
        if stage.uses_backend() {
            let id = self.gateways()?.backend_id();
            run.manifest.backend_id = id;
        }
        let dir = run.dir.clone();
        let mut w = Writer::new(&dir);
        let warnings = match stage {
            PipelineStage::Ingest => unreachable!("ingest runs through execute_ingest"),
            PipelineStage::Extract => self.extract(run, &mut w)?,
            PipelineStage::Generate => self.generate(run, &mut w)?,
            PipelineStage::Evaluate => self.evaluate(run, &mut w)?,
            PipelineStage::Categorize => self.categorize(run, &mut w)?,
            PipelineStage::Visualize => self.visualize(run, &mut w, opts.hypothesis)?,
            PipelineStage::Audit => self.audit(run, &mut w)?,
            PipelineStage::Report => self.report(run, &mut w)?,
        };
        for warning in &warnings {
            tracing::warn!(stage = %stage, "{warning}");
        }
        w.warnings(stage, &warnings)?;
        let outputs = w.outputs;
        run.complete(stage, outputs.clone())?;
        Ok(StageOutcome {
            stage,
            run_id: run.manifest.run_id.clone(),
            run_dir: dir,
            outputs,
            warnings,
            skipped: false,
        })
    }

    fn extract(&mut self, run: &Run, w: &mut Writer<'_>) -> Result<Vec<String>> {
        let store: CorpusStore = run.read_json("corpus.json")?;
        let profile = self.profile(Stage::Extraction)?;
        let gw = &self.gateways()?.primary;
        let results: Vec<Result<crate::Warned<SystemChart>>> = store
            .papers
            .par_iter()
            .map(|paper| extract_chart(paper, &profile, gw))
            .collect();
        let mut warnings = Vec::new();
        let mut charts = Vec::new();
        for result in results {
            match result {
                Ok(chart) => {
                    warnings.extend(chart.warnings);
                    warnings.extend(
                        validate_chart(&chart.value)
                            .into_iter()
                            .map(|c| format!("paper {}: {c}", chart.value.paper_id)),
                    );
                    charts.push(chart.value);
                }
                Err(e @ Error::Extraction { .. }) => warnings.push(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        charts.sort_by_key(|c| c.paper_id);
        for chart in &charts {
            w.json(&format!("charts/{}.json", chart.paper_id), chart)?;
        }
        w.text("charts.csv", &charts_csv(&charts)?)?;
        Ok(warnings)
    }

    fn generate(&mut self, run: &Run, w: &mut Writer<'_>) -> Result<Vec<String>> {
        let store: CorpusStore = run.read_json("corpus.json")?;
        let charts = load_charts(run)?;
        let mut warnings = Vec::new();
        let (ia, ib) = match &self.config.generation.sets {
            Some([a, b]) => {
                let find = |label: &str| {
                    store
                        .sets
                        .iter()
                        .position(|s| s.label == label)
                        .ok_or_else(|| {
                            Error::Config(format!("generation set `{label}` is not in the corpus"))
                        })
                };
                (find(a)?, find(b)?)
            }
            None => {
                if store.sets.len() > 2 {
                    warnings.push(format!(
                        "corpus has {} sets; pairing only `{}` with `{}`",
                        store.sets.len(),
                        store.sets[0].label,
                        store.sets[1].label
                    ));
                }
                (0, 1)
            }
        };
        let in_set = |i: usize| -> Vec<SystemChart> {
            charts
                .iter()
                .filter(|c| store.set_of(c.paper_id) == Some(i))
                .cloned()
                .collect()
        };
        let (charts_a, charts_b) = (in_set(ia), in_set(ib));
        let pairs = enumerate_pairs(
            &charts_a,
            &charts_b,
            self.config.generation.pair_cap,
            self.config.generation.seed,
        )?;
        warnings.extend(pairs.warnings);
        let rows: HashMap<(u32, u32), &ChartRow> = charts
            .iter()
            .flat_map(|c| c.rows.iter().map(move |r| ((c.paper_id, r.row_index), r)))
            .collect();
        let (label_a, label_b) = (store.sets[ia].label.as_str(), store.sets[ib].label.as_str());
        let n_samples = self.config.generation.n_samples;
        let profile = self.profile(Stage::Generation)?;
        let domain = self.domain.clone();
        let gw = &self.gateways()?.primary;
        let results: Vec<Result<crate::Warned<Vec<Hypothesis>>>> = pairs
            .value
            .par_iter()
            .map(|pair| {
                let ctx = PairContext {
                    pair: *pair,
                    row_a: rows[&(pair.a.paper_id, pair.a.row_index)],
                    row_b: rows[&(pair.b.paper_id, pair.b.row_index)],
                    set_a: label_a,
                    set_b: label_b,
                };
                generate_for_pair(&ctx, n_samples, &domain, &profile, gw)
            })
            .collect();
        let mut batches = Vec::with_capacity(results.len());
        for result in results {
            let batch = result?;
            warnings.extend(batch.warnings);
            batches.push(batch.value);
        }
        w.jsonl("hypotheses.jsonl", &assign_ids(batches))?;
        Ok(warnings)
    }

    fn evaluate(&mut self, run: &Run, w: &mut Writer<'_>) -> Result<Vec<String>> {
        let hypotheses: Vec<Hypothesis> = run.read_jsonl("hypotheses.jsonl")?;
        let profile = self.profile(Stage::Evaluation)?;
        let domain = self.domain.clone();
        let gw = &self.gateways()?.eval;
        let results: Vec<_> = hypotheses
            .par_iter()
            .map(|h| evaluate_hypothesis(h, &domain, &profile, gw))
            .collect();
        let mut warnings = Vec::new();
        let mut records = Vec::with_capacity(results.len());
        for result in results {
            let record = result?;
            warnings.extend(record.warnings);
            records.push(record.value);
        }
        w.jsonl("evaluations.jsonl", &records)?;
        Ok(warnings)
    }

    fn categorize(&mut self, run: &Run, w: &mut Writer<'_>) -> Result<Vec<String>> {
        let hypotheses: Vec<Hypothesis> = run.read_jsonl("hypotheses.jsonl")?;
        let evaluations: Vec<EvaluationRecord> = run.read_jsonl("evaluations.jsonl")?;
        let pool = filter_pool(&hypotheses, &evaluations);
        let mut warnings = pool.warnings;
        let pool = pool.value;
        let state = if pool.is_empty() {
            warnings
                .push("the Strong and Synergistic pool is empty; no ideas to categorize".into());
            CategorizationState {
                ideas: Vec::new(),
                halted: false,
                status: MergeStatus::Complete,
                dropped_hypotheses: Vec::new(),
                turns: 0,
            }
        } else {
            let chunks = chunk_pool(&pool, self.config.categorization.chunks)?;
            warnings.extend(chunks.warnings);
            let profile = self.profile(Stage::Categorization)?;
            let settings = self.config.merge_settings();
            let gw = &self.gateways()?.primary;
            let results: Vec<_> = chunks
                .value
                .par_iter()
                .map(|chunk| categorize_chunk(chunk, &profile, gw))
                .collect();
            let mut per_chunk = Vec::with_capacity(results.len());
            for result in results {
                let ideas = result?;
                warnings.extend(ideas.warnings);
                per_chunk.push(ideas.value);
            }
            if per_chunk.iter().all(Vec::is_empty) {
                warnings.push("no chunk produced an idea; every pool member is dropped".into());
                CategorizationState {
                    ideas: Vec::new(),
                    halted: false,
                    status: MergeStatus::ParseFailed,
                    dropped_hypotheses: pool.iter().map(|e| e.id()).collect(),
                    turns: 0,
                }
            } else {
                let merged = merge_ideas(&per_chunk, &pool, settings, &profile, gw)?;
                warnings.extend(merged.warnings);
                merged.value
            }
        };
        let pool_ids: Vec<u32> = pool.iter().map(|e| e.id()).collect();
        w.json("ideas.json", &state.ideas)?;
        w.json("coverage.json", &coverage_report(&state, &pool_ids))?;
        w.json("categorization.json", &state)?;
        Ok(warnings)
    }

    fn visualize(
        &mut self,
        run: &Run,
        w: &mut Writer<'_>,
        extra: Option<u32>,
    ) -> Result<Vec<String>> {
        let store: CorpusStore = run.read_json("corpus.json")?;
        let charts = load_charts(run)?;
        let hypotheses: Vec<Hypothesis> = run.read_jsonl("hypotheses.jsonl")?;
        let evaluations: Vec<EvaluationRecord> = run.read_jsonl("evaluations.jsonl")?;
        let profile = self.profile(Stage::Visualization)?;
        let gw = &self.gateways()?.primary;
        let results: Vec<_> = charts
            .par_iter()
            .map(|chart| -> Result<_> {
                let split = split_combined_rows(chart);
                let tagged = tag_and_simplify(&split, &profile, gw)?;
                let filled = fill_na(&tagged.value, &profile, gw)?;
                let mut warnings = tagged.warnings;
                warnings.extend(filled.warnings);
                Ok((filled.value, warnings))
            })
            .collect();
        let mut warnings = Vec::new();
        for result in results {
            let (normalized, more) = result?;
            warnings.extend(more);
            let origin = if store.set_of(normalized.paper_id) == Some(0) {
                Origin::SetA
            } else {
                Origin::SetB
            };
            w.json(
                &format!("normalized/{}.json", normalized.paper_id),
                &normalized,
            )?;
            w.text(
                &format!("graphs/paper_{}.dot", normalized.paper_id),
                &emit_dot(&build_chart_graph(&normalized, origin)),
            )?;
        }

        let rows: HashMap<(u32, u32), &ChartRow> = charts
            .iter()
            .flat_map(|c| c.rows.iter().map(move |r| ((c.paper_id, r.row_index), r)))
            .collect();
        let mut selected: Vec<u32> = filter_pool(&hypotheses, &evaluations)
            .value
            .iter()
            .map(|e| e.id())
            .collect();
        if let Some(id) = extra {
            if !hypotheses.iter().any(|h| h.hypothesis_id == id) {
                return Err(Error::Invalid(format!(
                    "hypothesis {id} does not exist in this run"
                )));
            }
            if !selected.contains(&id) {
                selected.push(id);
                selected.sort_unstable();
            }
        }
        let by_id: HashMap<u32, &Hypothesis> =
            hypotheses.iter().map(|h| (h.hypothesis_id, h)).collect();
        for id in selected {
            let h = by_id[&id];
            let (a, b) = (
                rows[&(h.pair.a.paper_id, h.pair.a.row_index)],
                rows[&(h.pair.b.paper_id, h.pair.b.row_index)],
            );
            match build_hypothesis_graph(h, a, b) {
                Ok(graph) => w.text(&format!("graphs/hypothesis_{id}.dot"), &emit_dot(&graph))?,
                Err(e) if Some(id) != extra => warnings.push(format!("graph skipped: {e}")),
                Err(e) => return Err(e),
            }
        }
        Ok(warnings)
    }

    fn audit(&mut self, run: &Run, w: &mut Writer<'_>) -> Result<Vec<String>> {
        let evaluations: Vec<EvaluationRecord> = run.read_jsonl("evaluations.jsonl")?;
        let mut warnings = Vec::new();
        let annotations = match &self.config.audit.annotations {
            Some(path) => read_annotations(&self.config.resolve(path))?,
            None => {
                warnings.push("no annotations configured; model-vs-human metrics skipped".into());
                Vec::new()
            }
        };
        let charts: Vec<ChartAuditInput> = match &self.config.audit.chart_audits {
            Some(path) => fsutil::read_json(&self.config.resolve(path))?,
            None => {
                warnings
                    .push("no chart audits configured; HMI and mechanism scores skipped".into());
                Vec::new()
            }
        };
        let report = build_audit_report(&charts, &annotations, &evaluations)?;
        w.json("audit.json", &report)?;
        Ok(warnings)
    }

    fn report(&mut self, run: &Run, w: &mut Writer<'_>) -> Result<Vec<String>> {
        let store: CorpusStore = run.read_json("corpus.json")?;
        let charts = load_charts(run)?;
        let hypotheses: Vec<Hypothesis> = run.read_jsonl("hypotheses.jsonl")?;
        let evaluations: Vec<EvaluationRecord> = run.read_jsonl("evaluations.jsonl")?;
        let ideas: Vec<Idea> = run.read_json("ideas.json")?;
        let coverage: CoverageReport = run.read_json("coverage.json")?;
        let audit: Option<AuditReport> = if run.has(PipelineStage::Audit) {
            Some(run.read_json("audit.json")?)
        } else {
            None
        };
        let report = build_report(ReportInputs {
            manifest: &run.manifest,
            domain: &self.domain.name,
            store: &store,
            charts: &charts,
            hypotheses: &hypotheses,
            evaluations: &evaluations,
            ideas: &ideas,
            coverage: &coverage,
            audit,
        });
        w.text("report.txt", &render_report(&report))?;
        w.json("report.json", &report)?;
        Ok(Vec::new())
    }
}

fn load_charts(run: &Run) -> Result<Vec<SystemChart>> {
    let mut charts: Vec<SystemChart> = run
        .outputs_of(PipelineStage::Extract)
        .iter()
        .filter(|p| p.starts_with("charts/") && p.ends_with(".json"))
        .map(|p| run.read_json(p))
        .collect::<Result<_>>()?;
    charts.sort_by_key(|c| c.paper_id);
    Ok(charts)
}

/// Reads the report of a finished run.
pub fn read_report(runs_dir: &Path, run_id: &str) -> Result<String> {
    let path = runs_dir.join(run_id).join("report.txt");
    if !runs_dir.join(run_id).join(MANIFEST_FILE).exists() {
        return Err(Error::UnknownRun(run_id.to_string()));
    }
    fsutil::read_to_string(&path)
}
