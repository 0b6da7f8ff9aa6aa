//! `hypoforge`: stage-oriented front end for the hypothesis pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hypoforge_core::pipeline::{
    read_report, BackendKind, Pipeline, PipelineConfig, PipelineStage, RunOptions, StageOutcome,
};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(
    name = "hypoforge",
    version,
    about = "Literature-to-hypothesis pipeline over system charts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read the corpus manifest and start a run.
    Ingest(Common),
    /// Extract a system chart from every paper.
    Extract(Common),
    /// Generate hypotheses for every cross-set row pair.
    Generate(Common),
    /// Judge synergy and grounding for every hypothesis.
    Evaluate(Common),
    /// Collapse the Strong and Synergistic pool into ideas.
    Categorize(Common),
    /// Normalize charts and emit DOT graphs.
    Visualize(Common),
    /// Score charts and labels against human audits.
    Audit(Common),
    /// Write the run summary and print it.
    Report(Common),
    /// Run every stage in order.
    All(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short, default_value = "hypoforge.toml")]
    config: PathBuf,
    /// Run to operate on; defaults to the latest run.
    #[arg(long)]
    run_id: Option<String>,
    /// Continue an existing run instead of starting a new one.
    #[arg(long)]
    resume: bool,
    /// Override the configured backend: live, scripted or replay.
    #[arg(long)]
    backend: Option<String>,
    /// Scripted-fixture directory (implies the scripted backend).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Also draw this hypothesis during visualize.
    #[arg(long)]
    hypothesis: Option<u32>,
}

impl Command {
    fn split(&self) -> (Option<PipelineStage>, &Common) {
        use Command::*;
        match self {
            Ingest(c) => (Some(PipelineStage::Ingest), c),
            Extract(c) => (Some(PipelineStage::Extract), c),
            Generate(c) => (Some(PipelineStage::Generate), c),
            Evaluate(c) => (Some(PipelineStage::Evaluate), c),
            Categorize(c) => (Some(PipelineStage::Categorize), c),
            Visualize(c) => (Some(PipelineStage::Visualize), c),
            Audit(c) => (Some(PipelineStage::Audit), c),
            Report(c) => (Some(PipelineStage::Report), c),
            All(c) => (None, c),
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    if let Some(kind) = &common.backend {
        config.backend.kind = kind.parse::<BackendKind>()?;
    }
    if let Some(dir) = &common.fixtures {
        config.backend.fixtures = Some(std::path::absolute(dir)?);
        if common.backend.is_none() {
            config.backend.kind = BackendKind::Scripted;
        }
    }
    Ok(config)
}

fn print_outcome(outcome: &StageOutcome) {
    if outcome.skipped {
        println!("{:<10} skipped (already complete)", outcome.stage);
        return;
    }
    let warnings = match outcome.warnings.len() {
        0 => String::new(),
        1 => ", 1 warning".to_string(),
        n => format!(", {n} warnings"),
    };
    println!(
        "{:<10} {} files{warnings}",
        outcome.stage,
        outcome.outputs.len()
    );
}

fn print_report(runs: &Path, run_id: &str) -> Result<()> {
    print!("{}", read_report(runs, run_id)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (stage, common) = cli.command.split();
    let config = load_config(common)?;
    let runs = config.runs_dir();
    let mut pipeline = Pipeline::new(config)?;
    let opts = RunOptions {
        run_id: common.run_id.clone(),
        resume: common.resume,
        hypothesis: common.hypothesis,
    };
    let (run_id, run_dir, finished_report) = match stage {
        Some(stage) => {
            let outcome = pipeline.run_stage(stage, &opts)?;
            print_outcome(&outcome);
            (
                outcome.run_id,
                outcome.run_dir,
                stage == PipelineStage::Report,
            )
        }
        None => {
            let outcomes = pipeline.run_all(&opts)?;
            outcomes.iter().for_each(print_outcome);
            let last = outcomes.last().context("no stage ran")?;
            (last.run_id.clone(), last.run_dir.clone(), true)
        }
    };
    println!("run {run_id} at {}", run_dir.display());
    if finished_report {
        println!();
        print_report(&runs, &run_id)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("HYPOFORGE_LOG").unwrap_or_else(|_| EnvFilter::new("error")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
