//! Batch pipeline that turns two keyword-labeled sets of scientific papers
//! into ranked, categorized materials-design hypotheses.
//!
//! The stages run in order, each reading the previous stage's artifacts:
//!
//! 1. [`corpus`]: ingest the labeled paper sets.
//! 2. [`extraction`]: per-paper processing-mechanism-structure-mechanism-property charts.
//! 3. [`generation`]: cross-set row pairs combined into synergistic hypotheses.
//! 4. [`evaluation`]: synergy and grounding scores, plus the audit metrics.
//! 5. [`categorization`]: two-step chunked grouping of the surviving pool into ideas.
//! 6. [`visualization`]: chart normalization and DOT graph emission.
//!
//! Every backend call goes through [`gateway::Gateway`], which caches replies
//! by request digest so that whole runs can be replayed offline.

pub mod categorization;
pub mod corpus;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod gateway;
pub mod generation;
pub mod pipeline;
pub mod visualization;

mod fsutil;

pub use error::{Error, Result};

/// A value together with the non-fatal warnings produced while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Warned<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

impl<T> Warned<T> {
    pub fn new(value: T) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }

    pub fn with_warnings(value: T, warnings: Vec<String>) -> Self {
        Self { value, warnings }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Warned<U> {
        Warned {
            value: f(self.value),
            warnings: self.warnings,
        }
    }
}
