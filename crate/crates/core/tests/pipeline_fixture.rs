//! Stage orchestration over the six-paper scripted fixture.
//!
//! Golden files live in `tests/fixtures/six_papers/golden`; run with
//! `UPDATE_GOLDEN=1` to rewrite them after an intended output change.

mod common;

use std::fs;

use common::*;
use hypoforge_core::categorization::CategorizationState;
use hypoforge_core::corpus::RunManifest;
use hypoforge_core::error::Error;
use hypoforge_core::pipeline::{Pipeline, PipelineStage, RunOptions, RunReport, LATEST_FILE};

#[test]
fn full_run_matches_golden_files() {
    let work = tempfile::tempdir().unwrap();
    let (run_dir, outcomes) = run_all(work.path());
    assert_eq!(outcomes.len(), PipelineStage::ALL.len());
    assert!(outcomes.iter().all(|o| !o.skipped));

    let golden = fixture_dir().join("golden");
    let mut files = deterministic_artifacts(&run_dir);
    files.extend(["coverage.json", "report.txt"].map(String::from));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let _ = fs::remove_dir_all(&golden);
        for f in &files {
            let dest = golden.join(f);
            fs::create_dir_all(dest.parent().unwrap()).unwrap();
            fs::copy(run_dir.join(f), dest).unwrap();
        }
    }
    let expected_dots = fs::read_dir(golden.join("graphs")).unwrap().count();
    assert_eq!(
        files.iter().filter(|f| f.ends_with(".dot")).count(),
        expected_dots
    );
    for f in &files {
        assert_eq!(
            read(&run_dir.join(f)),
            read(&golden.join(f)),
            "{f} differs from its golden copy"
        );
    }
}

#[test]
fn artifact_tree_is_complete() {
    let work = tempfile::tempdir().unwrap();
    let (run_dir, _) = run_all(work.path());
    for f in [
        "manifest.json",
        "corpus.json",
        "charts/1.json",
        "charts/6.json",
        "charts.csv",
        "hypotheses.jsonl",
        "evaluations.jsonl",
        "ideas.json",
        "coverage.json",
        "categorization.json",
        "normalized/6.json",
        "graphs/paper_1.dot",
        "graphs/hypothesis_1.dot",
        "audit.json",
        "report.txt",
        "report.json",
        "warnings/visualize.txt",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let manifest = RunManifest::load(&run_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.backend_id, "scripted");
    assert_eq!(manifest.stages.len(), 8);
    assert_eq!(
        read(&work.path().join("runs").join(LATEST_FILE)).trim(),
        manifest.run_id
    );
    assert!(
        !run_dir.join(".lock").exists(),
        "lock released after the run"
    );

    let report: RunReport = serde_json::from_str(&read(&run_dir.join("report.json"))).unwrap();
    assert_eq!(
        report.funnel_line(),
        "12 hypotheses → 7 Strong∧Synergistic → 3 ideas"
    );
    assert_eq!(report.unevaluated, 1);
    let audit = report.audit.expect("audit stage ran");
    assert_eq!(audit.charts.len(), 3);
    assert!(audit.synergy.is_some() && audit.grounding.is_some());

    let state: CategorizationState =
        serde_json::from_str(&read(&run_dir.join("categorization.json"))).unwrap();
    assert_eq!(state.dropped_hypotheses, vec![11]);
    assert_eq!(state.turns, 2, "one continuation prompt");
}

#[test]
fn rerun_creates_new_run_and_resume_skips() {
    let work = tempfile::tempdir().unwrap();
    let (first, _) = run_all(work.path());
    let cache_size = fs::read_dir(work.path().join("cache")).unwrap().count();

    let (second, _) = run_all(work.path());
    assert_ne!(first, second);
    let first_id = first.file_name().unwrap().to_string_lossy().into_owned();
    assert_eq!(
        second.file_name().unwrap().to_string_lossy(),
        format!("{first_id}-2")
    );
    for f in deterministic_artifacts(&first) {
        assert_eq!(
            read(&first.join(&f)),
            read(&second.join(&f)),
            "{f} differs on a warm rerun"
        );
    }
    assert_eq!(
        fs::read_dir(work.path().join("cache")).unwrap().count(),
        cache_size,
        "a warm rerun adds no transcripts"
    );

    let mut pipeline = Pipeline::new(fixture_config(work.path())).unwrap();
    let opts = RunOptions {
        run_id: Some(first_id.clone()),
        resume: true,
        hypothesis: None,
    };
    let outcomes = pipeline.run_all(&opts).unwrap();
    assert!(outcomes.iter().all(|o| o.skipped));
    assert_eq!(outcomes[0].run_dir, first);

    let taken = RunOptions {
        run_id: Some(first_id),
        ..RunOptions::default()
    };
    assert!(matches!(pipeline.run_all(&taken), Err(Error::Config(_))));
}

#[test]
fn rerunning_a_stage_invalidates_its_dependents() {
    let work = tempfile::tempdir().unwrap();
    let (run_dir, _) = run_all(work.path());
    let before = read(&run_dir.join("evaluations.jsonl"));
    let mut pipeline = Pipeline::new(fixture_config(work.path())).unwrap();
    pipeline
        .run_stage(PipelineStage::Evaluate, &RunOptions::default())
        .unwrap();
    assert_eq!(read(&run_dir.join("evaluations.jsonl")), before);

    let manifest = RunManifest::load(&run_dir.join("manifest.json")).unwrap();
    for gone in ["categorize", "visualize", "audit", "report"] {
        assert!(
            !manifest.stages.contains_key(gone),
            "{gone} should need a rerun"
        );
    }
    let err = pipeline
        .run_stage(PipelineStage::Report, &RunOptions::default())
        .unwrap_err();
    assert!(
        matches!(
            err,
            Error::MissingPrerequisite {
                stage: "report",
                requires: "categorize"
            }
        ),
        "{err}"
    );
    pipeline
        .run_stage(PipelineStage::Categorize, &RunOptions::default())
        .unwrap();
    pipeline
        .run_stage(PipelineStage::Report, &RunOptions::default())
        .unwrap();
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let work = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::new(fixture_config(work.path())).unwrap();
    let err = pipeline
        .run_stage(PipelineStage::Generate, &RunOptions::default())
        .unwrap_err();
    assert!(matches!(err, Error::UnknownRun(_)), "{err}");

    pipeline
        .run_stage(PipelineStage::Ingest, &RunOptions::default())
        .unwrap();
    let err = pipeline
        .run_stage(PipelineStage::Generate, &RunOptions::default())
        .unwrap_err();
    assert!(
        matches!(
            err,
            Error::MissingPrerequisite {
                stage: "generate",
                requires: "extract"
            }
        ),
        "{err}"
    );
    assert!(err.to_string().contains("extract"));
}

#[test]
fn a_locked_run_is_refused() {
    let work = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::new(fixture_config(work.path())).unwrap();
    let outcome = pipeline
        .run_stage(PipelineStage::Ingest, &RunOptions::default())
        .unwrap();
    fs::write(outcome.run_dir.join(".lock"), "").unwrap();
    let err = pipeline
        .run_stage(PipelineStage::Extract, &RunOptions::default())
        .unwrap_err();
    assert!(matches!(err, Error::Locked(_)), "{err}");
}

#[test]
fn invalid_config_fails_before_any_backend_call() {
    let work = tempfile::tempdir().unwrap();
    let mut config = fixture_config(work.path());
    config.generation.n_samples = 0;
    assert!(matches!(Pipeline::new(config), Err(Error::Config(_))));

    let mut config = fixture_config(work.path());
    config.backend.fixtures = Some(work.path().join("nowhere"));
    let mut pipeline = Pipeline::new(config).unwrap();
    pipeline
        .run_stage(PipelineStage::Ingest, &RunOptions::default())
        .unwrap();
    assert!(matches!(
        pipeline.run_stage(PipelineStage::Extract, &RunOptions::default()),
        Err(Error::Config(_))
    ));
    assert!(!work.path().join("cache").exists());
}

#[test]
fn extra_hypothesis_graph_on_request() {
    let work = tempfile::tempdir().unwrap();
    let (run_dir, _) = run_all(work.path());
    assert!(
        !run_dir.join("graphs/hypothesis_3.dot").exists(),
        "3 is outside the pool"
    );
    let mut pipeline = Pipeline::new(fixture_config(work.path())).unwrap();
    let opts = |h| RunOptions {
        hypothesis: Some(h),
        ..RunOptions::default()
    };
    pipeline
        .run_stage(PipelineStage::Visualize, &opts(3))
        .unwrap();
    assert!(read(&run_dir.join("graphs/hypothesis_3.dot")).contains("style=dashed, color=green"));
    assert!(matches!(
        pipeline.run_stage(PipelineStage::Visualize, &opts(99)),
        Err(Error::Invalid(_))
    ));
}
