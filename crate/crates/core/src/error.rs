use std::path::PathBuf;

use crate::extraction::table::TableError;
use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus: {0}")]
    Corpus(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error(transparent)]
    Table(#[from] TableError),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("paper {paper_id}: extraction failed after reprompt ({reason}); transcript {digest}")]
    Extraction {
        paper_id: u32,
        digest: String,
        reason: String,
    },

    #[error("stage `{stage}` needs the outputs of `{requires}`; run `{requires}` first")]
    MissingPrerequisite {
        stage: &'static str,
        requires: &'static str,
    },

    #[error("unknown run `{0}`")]
    UnknownRun(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
